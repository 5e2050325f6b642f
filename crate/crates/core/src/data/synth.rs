//! Synthetic biography corpus with controllable reference noise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::example::{write_jsonl, Example};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::table::{tokenize, NounLexicon, Record, Table};

pub const SCHEMA: [&str; 6] = [
    "Name_ID",
    "date of birth",
    "place of birth",
    "occupation",
    "member of sports team",
    "award received",
];

/// Every non-entity token the templates can emit, noise templates included.
pub const TEMPLATE_WORDS: [&str; 16] = [
    "(", ")", ".", "born", "is", "a", "an", "was", "in", "played", "for", "the", "received",
    "also", "later", "lived",
];

const FIRST: [&str; 48] = [
    "james", "mary", "robert", "patricia", "john", "jennifer", "michael", "linda", "david",
    "elizabeth", "william", "barbara", "richard", "susan", "joseph", "jessica", "thomas", "sarah",
    "charles", "karen", "daniel", "nancy", "matthew", "lisa", "anthony", "betty", "mark",
    "sandra", "donald", "ashley", "steven", "kimberly", "paul", "emily", "andrew", "donna",
    "joshua", "michelle", "kenneth", "carol", "kevin", "amanda", "brian", "melissa", "george",
    "deborah", "timothy", "stephanie",
];

const LAST: [&str; 60] = [
    "smith", "johnson", "williams", "brown", "jones", "garcia", "miller", "davis", "rodriguez",
    "martinez", "hernandez", "lopez", "gonzalez", "wilson", "anderson", "taylor", "moore",
    "jackson", "martin", "lee", "perez", "thompson", "white", "harris", "sanchez", "clark",
    "ramirez", "lewis", "robinson", "walker", "young", "allen", "king", "wright", "scott",
    "torres", "nguyen", "hill", "flores", "green", "adams", "nelson", "baker", "hall", "rivera",
    "campbell", "mitchell", "carter", "roberts", "gomez", "phillips", "evans", "turner", "diaz",
    "parker", "cruz", "edwards", "collins", "reyes", "stewart",
];

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];

const CITIES: [&str; 30] = [
    "seattle", "boston", "chicago", "denver", "houston", "atlanta", "portland", "phoenix",
    "dallas", "detroit", "miami", "new orleans", "san diego", "salt lake city", "memphis",
    "omaha", "tucson", "fresno", "el paso", "cleveland", "toledo", "madison", "raleigh",
    "richmond", "baltimore", "kansas city", "pittsburgh", "sacramento", "austin", "nashville",
];

const OCCUPATIONS: [&str; 20] = [
    "engineer", "architect", "physician", "lawyer", "painter", "novelist", "chemist",
    "economist", "journalist", "composer", "pianist", "botanist", "surgeon", "historian",
    "photographer", "sculptor", "astronomer", "linguist", "pharmacist", "geologist",
];

const TEAMS: [&str; 20] = [
    "river hawks", "iron wolves", "red foxes", "blue herons", "storm riders", "golden bears",
    "night owls", "silver sharks", "thunder bolts", "stone lions", "grey falcons", "fire ants",
    "sea otters", "mountain goats", "prairie dogs", "desert vipers", "harbor seals",
    "canyon eagles", "forest rangers", "valley bisons",
];

const AWARDS: [&str; 15] = [
    "turing award", "nobel prize", "pulitzer prize", "fields medal", "abel prize", "wolf prize",
    "kyoto prize", "crafoord prize", "polar medal", "copley medal", "davy medal", "hughes medal",
    "lasker award", "templeton prize", "booker prize",
];

/// Probability that each optional row (place of birth, team, award) is present.
const OPTIONAL_ROW_RATE: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub hallucination_rate: f64,
    pub omission_rate: f64,
}

impl SynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            hallucination_rate: 0.0,
            omission_rate: 0.0,
        }
    }

    pub fn with_noise(mut self, hallucination_rate: f64, omission_rate: f64) -> Self {
        self.hallucination_rate = hallucination_rate;
        self.omission_rate = omission_rate;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("synthetic corpus needs n >= 10, got {}", self.n)));
        }
        for (name, r) in [
            ("hallucination_rate", self.hallucination_rate),
            ("omission_rate", self.omission_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub lexicon: NounLexicon,
}

#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub nouns: PathBuf,
}

/// All entity tokens the generator can emit.
pub fn synth_lexicon() -> NounLexicon {
    let mut words = BTreeSet::new();
    for list in [&FIRST[..], &LAST, &MONTHS, &CITIES, &OCCUPATIONS, &TEAMS, &AWARDS] {
        for entry in list {
            words.extend(tokenize(entry));
        }
    }
    NounLexicon::new(words)
}

fn capitalize(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

/// Samples from `list` until the entry shares no token with `taken`.
fn pick_unseen<'a>(rng: &mut ChaCha8Rng, list: &[&'a str], taken: &BTreeSet<String>) -> &'a str {
    loop {
        let e = *list.choose(rng).expect("non-empty list");
        if tokenize(e).iter().all(|t| !taken.contains(t)) {
            return e;
        }
    }
}

fn one_example(rng: &mut ChaCha8Rng, cfg: &SynthConfig, lexicon: &NounLexicon) -> Example {
    let first = *FIRST.choose(rng).unwrap();
    let last = *LAST.choose(rng).unwrap();
    let month = *MONTHS.choose(rng).unwrap();
    let day: u32 = rng.gen_range(1..=28);
    let year: u32 = rng.gen_range(1900..=1999);
    let occupation = *OCCUPATIONS.choose(rng).unwrap();
    let city = rng.gen_bool(OPTIONAL_ROW_RATE).then(|| *CITIES.choose(rng).unwrap());
    let team = rng.gen_bool(OPTIONAL_ROW_RATE).then(|| *TEAMS.choose(rng).unwrap());
    let award = rng.gen_bool(OPTIONAL_ROW_RATE).then(|| *AWARDS.choose(rng).unwrap());

    let mut rows = vec![
        Record::new(SCHEMA[0], format!("{} {}", capitalize(first), capitalize(last))),
        Record::new(SCHEMA[1], format!("{} {day} {year}", capitalize(month))),
    ];
    if let Some(c) = city {
        rows.push(Record::new(SCHEMA[2], capitalize(c)));
    }
    rows.push(Record::new(SCHEMA[3], occupation));
    if let Some(t) = team {
        rows.push(Record::new(SCHEMA[4], capitalize(t)));
    }
    if let Some(a) = award {
        rows.push(Record::new(SCHEMA[5], capitalize(a)));
    }

    // Omission drops the mention of one non-name row.
    let omitted = if rng.gen_bool(cfg.omission_rate) {
        rows[1..].choose(rng).map(|r| r.slot_type.clone())
    } else {
        None
    };
    let said = |slot: &str| omitted.as_deref() != Some(slot);

    let mut opening = format!("{first} {last}");
    if said(SCHEMA[1]) {
        opening.push_str(&format!(" ( born {month} {day} {year} )"));
    }
    if said(SCHEMA[3]) {
        opening.push_str(&format!(" is {} {occupation}", article(occupation)));
    }
    let mut sentences = vec![format!("{opening} .")];
    if let Some(c) = city.filter(|_| said(SCHEMA[2])) {
        sentences.push(format!("{last} was born in {c} ."));
    }
    if let Some(t) = team.filter(|_| said(SCHEMA[4])) {
        sentences.push(format!("{last} played for the {t} ."));
    }
    if let Some(a) = award.filter(|_| said(SCHEMA[5])) {
        sentences.push(format!("{last} received the {a} ."));
    }

    if rng.gen_bool(cfg.hallucination_rate) {
        let taken: BTreeSet<String> = rows.iter().flat_map(|r| r.value_tokens()).collect();
        let extra = match rng.gen_range(0..3) {
            0 => format!("{last} also played for the {} .", pick_unseen(rng, &TEAMS, &taken)),
            1 => format!("{last} also received the {} .", pick_unseen(rng, &AWARDS, &taken)),
            _ => format!("{last} later lived in {} .", pick_unseen(rng, &CITIES, &taken)),
        };
        let at = rng.gen_range(1..=sentences.len());
        sentences.insert(at, extra);
    }

    let text = sentences.join(" ");
    let mut keywords: Vec<String> = Vec::new();
    for t in tokenize(&text) {
        if lexicon.contains(&t) && !keywords.contains(&t) {
            keywords.push(t);
        }
    }
    Example::new(Table::new(rows).expect("generator emits valid rows"), text, Some(keywords))
        .expect("generator emits valid examples")
}

/// Generates `n` examples and splits them 80/10/10 in generation order.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = synth_lexicon();
    let mut all: Vec<Example> = (0..cfg.n).map(|_| one_example(&mut rng, cfg, &lexicon)).collect();
    let held = cfg.n / 10;
    let test = all.split_off(cfg.n - held);
    let valid = all.split_off(cfg.n - 2 * held);
    Ok(SynthCorpus {
        train: all,
        valid,
        test,
        lexicon,
    })
}

impl SynthCorpus {
    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles {
            train: dir.join("train.jsonl"),
            valid: dir.join("valid.jsonl"),
            test: dir.join("test.jsonl"),
            nouns: dir.join("nouns.txt"),
        };
        write_jsonl(&files.train, &self.train)?;
        write_jsonl(&files.valid, &self.valid)?;
        write_jsonl(&files.test, &self.test)?;
        let mut nouns = String::from("# entity words of the synthetic generator\n");
        for w in self.lexicon.sorted() {
            nouns.push_str(w);
            nouns.push('\n');
        }
        write_atomic(&files.nouns, nouns.as_bytes())?;
        Ok(files)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// True if the text names a lexicon entity whose tokens are absent from the table.
pub fn mentions_foreign_entity(ex: &Example, lexicon: &NounLexicon) -> bool {
    let values: BTreeSet<String> = ex.table.value_tokens().into_iter().collect();
    tokenize(&ex.text)
        .iter()
        .any(|t| lexicon.contains(t) && !values.contains(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_words_are_not_entities() {
        let lex = synth_lexicon();
        for w in TEMPLATE_WORDS {
            assert!(!lex.contains(w), "{w}");
        }
    }

    #[test]
    fn split_sizes() {
        let c = synth_generate(&SynthConfig::new(10, 1)).unwrap();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (8, 1, 1));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_generate(&SynthConfig::new(9, 1)).is_err());
        assert!(synth_generate(&SynthConfig::new(10, 1).with_noise(1.5, 0.0)).is_err());
        assert!(synth_generate(&SynthConfig::new(10, 1).with_noise(0.0, -0.1)).is_err());
    }
}
