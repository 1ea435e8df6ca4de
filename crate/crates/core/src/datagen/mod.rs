//! Indirect-object-identification prompts with clean/corrupt pairing.
//!
//! Clean prompts fill a template's name slots with `A` (indirect object) and
//! `B` (subject); the corrupted counterpart keeps template, place and object
//! but replaces both names with a fresh pair, so neither answer appears in
//! it. Token ids start with `<bos>`.

mod lexicon;
mod tokenizer;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use lexicon::Lexicon;
pub use tokenizer::{join_words, split_words, Tokenizer, BOS};

/// The fifteen BABA-ordered templates; the answer is the trailing `[A]`.
pub const BABA_TEMPLATES: [&str; 15] = [
    "Then, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Then, [B] and [A] had a lot of fun at the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Then, [B] and [A] were working at the [PLACE]. [B] decided to give a [OBJECT] to [A]",
    "Then, [B] and [A] were thinking about going to the [PLACE]. [B] wanted to give a [OBJECT] to [A]",
    "Then, [B] and [A] had a long argument, and afterwards [B] said to [A]",
    "After [B] and [A] went to the [PLACE], [B] gave a [OBJECT] to [A]",
    "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give it to [A]",
    "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give the [OBJECT] to [A]",
    "While [B] and [A] were working at the [PLACE], [B] gave a [OBJECT] to [A]",
    "While [B] and [A] were commuting to the [PLACE], [B] gave a [OBJECT] to [A]",
    "After the lunch, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Afterwards, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
    "Then, [B] and [A] had a long argument. Afterwards [B] said to [A]",
    "The [PLACE] [B] and [A] went to had a [OBJECT]. [B] gave it to [A]",
    "Friends [B] and [A] found a [OBJECT] at the [PLACE]. [B] gave it to [A]",
];

/// Which name is mentioned first in the opening pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NameOrder {
    Baba,
    Abba,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    Word(String),
    A,
    B,
    Place,
    Object,
}

/// A prompt pattern split into word-level slots, answer slot last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub pattern: String,
    pub order: NameOrder,
    slots: Vec<Slot>,
}

impl Template {
    pub fn parse(pattern: &str, order: NameOrder) -> Result<Self> {
        let slots: Vec<Slot> = split_words(pattern)
            .into_iter()
            .map(|w| match w {
                "[A]" => Slot::A,
                "[B]" => Slot::B,
                "[PLACE]" => Slot::Place,
                "[OBJECT]" => Slot::Object,
                other => Slot::Word(other.to_string()),
            })
            .collect();
        if !slots.contains(&Slot::B) || slots.last() != Some(&Slot::A) {
            return Err(Error::Dataset(format!(
                "template {pattern:?} must contain [B] and end with the [A] answer slot"
            )));
        }
        Ok(Self {
            pattern: pattern.to_string(),
            order,
            slots,
        })
    }

    /// The ABBA counterpart: the opening `[B] and [A]` becomes `[A] and [B]`.
    pub fn abba(&self) -> Result<Self> {
        if !self.pattern.contains("[B] and [A]") {
            return Err(Error::Dataset(format!("no opening name pair in {:?}", self.pattern)));
        }
        Template::parse(&self.pattern.replacen("[B] and [A]", "[A] and [B]", 1), NameOrder::Abba)
    }

    /// Slots of the prompt, excluding the answer.
    pub fn prompt_slots(&self) -> &[Slot] {
        &self.slots[..self.slots.len() - 1]
    }

    pub fn uses_place(&self) -> bool {
        self.slots.contains(&Slot::Place)
    }

    pub fn uses_object(&self) -> bool {
        self.slots.contains(&Slot::Object)
    }

    /// Literal words of the template, in order of appearance.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().filter_map(|s| match s {
            Slot::Word(w) => Some(w.as_str()),
            _ => None,
        })
    }

    fn render(&self, fill: &SlotFill) -> Vec<String> {
        self.prompt_slots()
            .iter()
            .map(|s| match s {
                Slot::Word(w) => w.clone(),
                Slot::A => fill.a.clone(),
                Slot::B => fill.b.clone(),
                Slot::Place => fill.place.clone().unwrap_or_default(),
                Slot::Object => fill.object.clone().unwrap_or_default(),
            })
            .collect()
    }

    /// Regex for a rendered prompt, one capture group per slot occurrence.
    pub fn prompt_regex(&self) -> Regex {
        let mut re = String::from("^");
        let mut first = true;
        for s in self.prompt_slots() {
            let piece = match s {
                Slot::Word(w) => regex::escape(w),
                _ => "([A-Za-z]+)".to_string(),
            };
            let attach = matches!(s, Slot::Word(w) if w == "," || w == ".");
            if !first && !attach {
                re.push(' ');
            }
            re.push_str(&piece);
            first = false;
        }
        re.push('$');
        Regex::new(&re).expect("template regex")
    }

    /// Recover the slot fill from a rendered prompt, checking that repeated
    /// slots agree.
    pub fn match_prompt(&self, text: &str) -> Option<SlotFill> {
        let caps = self.prompt_regex().captures(text)?;
        let mut fill = SlotFill::default();
        let mut groups = caps.iter().skip(1).map(|m| m.map(|m| m.as_str().to_string()));
        for s in self.prompt_slots() {
            let target = match s {
                Slot::Word(_) => continue,
                Slot::A => &mut fill.a,
                Slot::B => &mut fill.b,
                Slot::Place => fill.place.get_or_insert_with(String::new),
                Slot::Object => fill.object.get_or_insert_with(String::new),
            };
            let got = groups.next()??;
            if target.is_empty() {
                *target = got;
            } else if *target != got {
                return None;
            }
        }
        Some(fill)
    }
}

/// Values assigned to a template's slots.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SlotFill {
    pub a: String,
    pub b: String,
    pub place: Option<String>,
    pub object: Option<String>,
}

/// A clean prompt, its corrupted counterpart, and the two answer tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub clean_text: String,
    pub corrupt_text: String,
    pub clean_ids: Vec<u32>,
    pub corrupt_ids: Vec<u32>,
    pub io_id: u32,
    pub s_id: u32,
    pub template_id: usize,
}

impl PromptPair {
    /// The same clean prompt used as its own corruption.
    pub fn self_paired(&self) -> Self {
        Self {
            corrupt_text: self.clean_text.clone(),
            corrupt_ids: self.clean_ids.clone(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.clean_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 200,
            validation: 200,
            test: 1000,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<PromptPair>,
    pub validation: Vec<PromptPair>,
    pub test: Vec<PromptPair>,
    pub seed: u64,
}

/// Generation knobs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationOptions {
    /// Alternate BABA and ABBA templates instead of sampling uniformly over all.
    #[serde(default)]
    pub balance_orders: bool,
}

/// Templates, lexicon, and vocabulary of the IOI task.
#[derive(Clone, Debug)]
pub struct IoiTask {
    lexicon: Lexicon,
    templates: Vec<Template>,
    tokenizer: Tokenizer,
}

impl IoiTask {
    /// The standard lexicon with all BABA templates and their ABBA variants.
    pub fn standard() -> Self {
        Self::new(Lexicon::standard(), &BABA_TEMPLATES).expect("built-in task is valid")
    }

    /// Template ids `0..n` are the BABA patterns, `n..2n` their ABBA variants.
    pub fn new(lexicon: Lexicon, baba_patterns: &[&str]) -> Result<Self> {
        lexicon.validate()?;
        let baba = baba_patterns
            .iter()
            .map(|p| Template::parse(p, NameOrder::Baba))
            .collect::<Result<Vec<_>>>()?;
        let abba = baba.iter().map(Template::abba).collect::<Result<Vec<_>>>()?;
        let templates: Vec<Template> = baba.into_iter().chain(abba).collect();

        let function_words: Vec<&str> = templates.iter().flat_map(Template::words).collect();
        let lex_words: HashSet<&str> = lexicon
            .names
            .iter()
            .chain(&lexicon.places)
            .chain(&lexicon.objects)
            .map(String::as_str)
            .collect();
        if let Some(w) = function_words.iter().find(|w| lex_words.contains(*w)) {
            return Err(Error::Dataset(format!(
                "lexicon entry {w:?} collides with a template word"
            )));
        }
        let tokenizer = Tokenizer::new(
            std::iter::once(BOS)
                .chain(function_words.iter().copied())
                .chain(lex_words_in_order(&lexicon)),
        );
        Ok(Self {
            lexicon,
            templates,
            tokenizer,
        })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Number of distinct `(template, A, B, place, object)` tuples.
    pub fn max_distinct(&self) -> usize {
        let n = self.lexicon.names.len();
        self.templates
            .iter()
            .map(|t| {
                let mut c = n * (n - 1);
                if t.uses_place() {
                    c *= self.lexicon.places.len();
                }
                if t.uses_object() {
                    c *= self.lexicon.objects.len();
                }
                c
            })
            .sum()
    }

    fn sample_fill<R: Rng>(&self, template: &Template, rng: &mut R) -> SlotFill {
        let names: Vec<&String> = self.lexicon.names.choose_multiple(rng, 2).collect();
        SlotFill {
            a: names[0].clone(),
            b: names[1].clone(),
            place: template
                .uses_place()
                .then(|| self.lexicon.places.choose(rng).expect("places").clone()),
            object: template
                .uses_object()
                .then(|| self.lexicon.objects.choose(rng).expect("objects").clone()),
        }
    }

    /// Replace both names with a fresh distinct pair outside `{A, B}`.
    pub fn corrupt_fill<R: Rng>(&self, clean: &SlotFill, rng: &mut R) -> Result<SlotFill> {
        let fresh: Vec<&String> = self
            .lexicon
            .names
            .iter()
            .filter(|n| **n != clean.a && **n != clean.b)
            .collect();
        if fresh.len() < 2 {
            return Err(Error::Dataset(format!(
                "need two names outside {{{}, {}}} to corrupt, lexicon has {}",
                clean.a,
                clean.b,
                self.lexicon.names.len()
            )));
        }
        let pick: Vec<&&String> = fresh.choose_multiple(rng, 2).collect();
        Ok(SlotFill {
            a: pick[0].to_string(),
            b: pick[1].to_string(),
            ..clean.clone()
        })
    }

    /// Render a pair from a template and its clean/corrupt fills.
    pub fn render(&self, template_id: usize, clean: &SlotFill, corrupt: &SlotFill) -> Result<PromptPair> {
        let t = self
            .templates
            .get(template_id)
            .ok_or_else(|| Error::Dataset(format!("no template {template_id}")))?;
        let bos = self.tokenizer.bos()?;
        let encode = |words: &[String]| -> Result<Vec<u32>> {
            std::iter::once(Ok(bos))
                .chain(words.iter().map(|w| self.tokenizer.id(w)))
                .collect()
        };
        let clean_words = t.render(clean);
        let corrupt_words = t.render(corrupt);
        Ok(PromptPair {
            clean_text: join_words(&clean_words),
            corrupt_text: join_words(&corrupt_words),
            clean_ids: encode(&clean_words)?,
            corrupt_ids: encode(&corrupt_words)?,
            io_id: self.tokenizer.id(&clean.a)?,
            s_id: self.tokenizer.id(&clean.b)?,
            template_id,
        })
    }

    /// Corrupt an already-rendered clean pair using `rng`.
    pub fn corrupt<R: Rng>(&self, pair: &PromptPair, rng: &mut R) -> Result<PromptPair> {
        let t = &self.templates[pair.template_id];
        let fill = t
            .match_prompt(&pair.clean_text)
            .ok_or_else(|| Error::Dataset(format!("{:?} does not match its template", pair.clean_text)))?;
        let bad = self.corrupt_fill(&fill, rng)?;
        self.render(pair.template_id, &fill, &bad)
    }

    /// Deterministic train/validation/test splits with no repeated tuple
    /// anywhere across the three splits.
    pub fn generate(&self, counts: SplitCounts, seed: u64) -> Result<DatasetSplits> {
        self.generate_with(counts, seed, GenerationOptions::default())
    }

    pub fn generate_with(&self, counts: SplitCounts, seed: u64, opts: GenerationOptions) -> Result<DatasetSplits> {
        let max = self.max_distinct();
        if counts.total() > max {
            return Err(Error::Infeasible {
                requested: counts.total(),
                max_feasible: max,
            });
        }
        if self.lexicon.names.len() < 4 {
            return Err(Error::Dataset("corruption needs at least four names".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corrupt_rng = ChaCha8Rng::seed_from_u64(seed);
        corrupt_rng.set_stream(1);
        let mut seen: HashSet<(usize, SlotFill)> = HashSet::with_capacity(counts.total().min(1 << 16));
        let half = self.templates.len() / 2;
        let mut produced = 0usize;
        let mut draw = |n: usize| -> Result<Vec<PromptPair>> {
            let mut out = Vec::with_capacity(n.min(1 << 16));
            while out.len() < n {
                let tid = if opts.balance_orders {
                    let base = rng.random_range(0..half);
                    if produced % 2 == 0 {
                        base
                    } else {
                        base + half
                    }
                } else {
                    rng.random_range(0..self.templates.len())
                };
                let fill = self.sample_fill(&self.templates[tid], &mut rng);
                if !seen.insert((tid, fill.clone())) {
                    continue;
                }
                let bad = self.corrupt_fill(&fill, &mut corrupt_rng)?;
                out.push(self.render(tid, &fill, &bad)?);
                produced += 1;
            }
            Ok(out)
        };
        let train = draw(counts.train)?;
        let validation = draw(counts.validation)?;
        let test = draw(counts.test)?;
        Ok(DatasetSplits {
            train,
            validation,
            test,
            seed,
        })
    }
}

fn lex_words_in_order(lex: &Lexicon) -> impl Iterator<Item = &str> {
    lex.names
        .iter()
        .chain(&lex.places)
        .chain(&lex.objects)
        .map(String::as_str)
}

/// One JSON object per line, LF-terminated.
pub fn write_jsonl<W: Write>(mut out: W, pairs: &[PromptPair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PromptPair>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PromptPair = serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        if p.clean_ids.len() != p.corrupt_ids.len() {
            return Err(Error::Dataset(format!("line {}: clean/corrupt lengths differ", i + 1)));
        }
        out.push(p);
    }
    Ok(out)
}
