use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NAMES: [&str; 100] = [
    "Aaron",
    "Adam",
    "Alan",
    "Alex",
    "Alice",
    "Amy",
    "Anderson",
    "Andre",
    "Andrew",
    "Andy",
    "Anna",
    "Anthony",
    "Arthur",
    "Austin",
    "Blake",
    "Brandon",
    "Brian",
    "Carter",
    "Charles",
    "Charlie",
    "Christian",
    "Christopher",
    "Clark",
    "Cole",
    "Collins",
    "Connor",
    "Crystal",
    "Daniel",
    "David",
    "Dean",
    "Dylan",
    "Edward",
    "Elizabeth",
    "Emily",
    "Eric",
    "Eva",
    "Ford",
    "Frank",
    "George",
    "Georgia",
    "Graham",
    "Grant",
    "Henry",
    "Ian",
    "Jack",
    "Jacob",
    "Jake",
    "James",
    "Jamie",
    "Jane",
    "Jason",
    "Jay",
    "Jennifer",
    "Jeremy",
    "Jessica",
    "John",
    "Jonathan",
    "Jordan",
    "Joseph",
    "Joshua",
    "Justin",
    "Kate",
    "Kelly",
    "Kevin",
    "Kyle",
    "Laura",
    "Leon",
    "Lewis",
    "Lisa",
    "Louis",
    "Luke",
    "Madison",
    "Marco",
    "Marcus",
    "Maria",
    "Mark",
    "Martin",
    "Mary",
    "Matthew",
    "Max",
    "Michael",
    "Michelle",
    "Morgan",
    "Patrick",
    "Paul",
    "Peter",
    "Prince",
    "Rachel",
    "Richard",
    "River",
    "Robert",
    "Roman",
    "Rose",
    "Ruby",
    "Russell",
    "Ryan",
    "Sarah",
    "Scott",
    "Sean",
    "Simon",
];

const PLACES: [&str; 20] = [
    "store",
    "garden",
    "restaurant",
    "school",
    "hospital",
    "office",
    "house",
    "station",
    "park",
    "library",
    "beach",
    "museum",
    "market",
    "airport",
    "cafe",
    "theater",
    "gym",
    "church",
    "bank",
    "zoo",
];

const OBJECTS: [&str; 20] = [
    "ring",
    "kiss",
    "bone",
    "basketball",
    "computer",
    "necklace",
    "drink",
    "snack",
    "popsicle",
    "book",
    "flower",
    "letter",
    "guitar",
    "camera",
    "ticket",
    "cake",
    "pen",
    "watch",
    "map",
    "ball",
];

/// Slot fillers: person names, places and objects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lexicon {
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub objects: Vec<String>,
}

impl Lexicon {
    /// 100 common first names, 20 places, 20 objects.
    pub fn standard() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            names: own(&NAMES),
            places: own(&PLACES),
            objects: own(&OBJECTS),
        }
    }

    /// Entries must be distinct single words without punctuation.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for w in self.names.iter().chain(&self.places).chain(&self.objects) {
            if w.is_empty() || w.contains(|c: char| c.is_whitespace() || c == ',' || c == '.') {
                return Err(Error::Dataset(format!("lexicon entry {w:?} is not a single word")));
            }
            if !seen.insert(w.as_str()) {
                return Err(Error::Dataset(format!("duplicate lexicon entry {w:?}")));
            }
        }
        if self.names.len() < 2 {
            return Err(Error::Dataset("need at least two names".into()));
        }
        Ok(())
    }
}
