//! A small synthetic dictionary for smoke runs and tests.
//!
//! 25 senses over 20 headwords (several polysemous, disambiguated by a cue
//! word in the context). Each sense gets two training contexts and one each
//! for validation and test, built from generic templates so that the only
//! informative context tokens are the headword and its cue.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoRecord {
    pub word: String,
    pub context: String,
    pub definition: String,
}

#[derive(Clone, Debug)]
pub struct DemoCorpus {
    pub train: Vec<DemoRecord>,
    pub valid: Vec<DemoRecord>,
    pub test: Vec<DemoRecord>,
}

const SENSES: [(&str, &str, [&str; 3]); 25] = [
    ("bank", "an institution that keeps and lends money", ["money", "loan", "cash"]),
    ("bank", "the sloping land beside a river", ["river", "water", "fish"]),
    ("bat", "a small flying mammal of the night", ["cave", "night", "wing"]),
    ("bat", "a wooden club used to hit a ball", ["game", "ball", "team"]),
    ("double", "twice as great or many", ["portion", "size", "dose"]),
    ("spring", "the season after winter", ["flower", "winter", "bloom"]),
    ("spring", "a coiled metal piece that returns to shape", ["metal", "coil", "clock"]),
    ("light", "not heavy in weight", ["bag", "load", "feather"]),
    ("light", "the energy that makes things visible", ["lamp", "sun", "room"]),
    ("bark", "the sharp sound a dog makes", ["dog", "yard", "noise"]),
    ("bark", "the outer layer of a tree", ["tree", "trunk", "forest"]),
    ("kettle", "a pot for boiling water", ["tea", "stove", "kitchen"]),
    ("anchor", "a heavy weight that holds a ship in place", ["ship", "harbor", "chain"]),
    ("lantern", "a portable case that holds a flame", ["camp", "candle", "path"]),
    ("orchard", "a field of fruit trees", ["apple", "farm", "pear"]),
    ("glacier", "a slow moving mass of ice", ["mountain", "ice", "valley"]),
    ("violin", "a string instrument played with a bow", ["music", "bow", "concert"]),
    ("compass", "a tool that shows direction", ["map", "north", "hike"]),
    ("ladder", "a frame of steps for climbing", ["roof", "wall", "climb"]),
    ("quarrel", "an angry argument between people", ["friends", "shout", "dispute"]),
    ("harvest", "the gathering of ripe crops", ["field", "farmer", "grain"]),
    ("pillow", "a soft cushion for the head", ["bed", "sleep", "sheet"]),
    ("thunder", "the loud sound that follows lightning", ["storm", "rain", "cloud"]),
    ("scarf", "a long cloth worn around the neck", ["wool", "neck", "coat"]),
    ("mint", "a plant with fragrant leaves", ["garden", "leaf", "herb"]),
];

const TEMPLATES: [&str; 8] = [
    "the {cue} {word} was here",
    "we saw a {word} by the {cue}",
    "she said the {word} had a {cue}",
    "a {word} near the {cue} again",
    "they found the {word} with the {cue}",
    "every {cue} needs a {word}",
    "his {word} and her {cue}",
    "after the {cue} came the {word}",
];

fn record(sense: usize, template: usize, cue: usize) -> DemoRecord {
    let (word, definition, cues) = SENSES[sense];
    let context = TEMPLATES[template % TEMPLATES.len()].replace("{cue}", cues[cue]).replace("{word}", word);
    DemoRecord { word: word.into(), context, definition: definition.into() }
}

/// Deterministic: 50 train, 25 valid and 25 test records.
pub fn generate() -> DemoCorpus {
    let mut c = DemoCorpus { train: Vec::new(), valid: Vec::new(), test: Vec::new() };
    for s in 0..SENSES.len() {
        c.train.push(record(s, 3 * s, 0));
        c.train.push(record(s, 3 * s + 1, 1));
        c.valid.push(record(s, 3 * s + 2, 2));
        c.test.push(record(s, 3 * s + 4, 0));
    }
    c
}

pub fn tsv(records: &[DemoRecord]) -> String {
    records.iter().map(|r| format!("{}\t{}\t{}\n", r.word, r.context, r.definition)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dataset, DatasetFormat};

    #[test]
    fn sizes_and_parse() {
        let c = generate();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (50, 25, 25));
        for split in [&c.train, &c.valid, &c.test] {
            let r = parse_dataset(&tsv(split), DatasetFormat::Tsv, true).unwrap();
            assert_eq!(r.entries.len(), split.len());
            assert!(r.warnings.is_empty(), "{:?}", r.warnings);
        }
    }

    #[test]
    fn test_contexts_are_unseen() {
        let c = generate();
        for t in &c.test {
            assert!(c.train.iter().all(|r| r.context != t.context));
        }
    }
}
