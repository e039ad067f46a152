//! Synthetic fictional-author QA corpus, word-level tokenizer, and
//! forget/retain/holdout splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const ALLOWED_FRACTIONS: [f64; 4] = [0.01, 0.05, 0.10, 0.20];

/// Share of every profile's QA held out from training (MIA non-members).
pub const HOLDOUT_SHARE: f64 = 0.2;

pub(crate) const GIVEN_NAMES: &[&str] = &[
    "Nikolai", "Basil", "Hessa", "Tamsin", "Oskar", "Liora", "Corwin", "Mirela", "Dashiel",
    "Ysolde", "Fenwick", "Anouk", "Patrizio", "Zelda", "Ruslan", "Ingrid", "Cassius", "Emeric",
    "Juniper", "Thaddeus", "Sabine", "Wendell", "Orla", "Gideon", "Marisol", "Leopold", "Ottilie",
    "Barnaby", "Seraphine", "Kasimir", "Delphine", "Ambrose", "Yara", "Lucan", "Philippa",
    "Evander", "Rosalind", "Tobias", "Ilse", "Caspian",
];

pub(crate) const FAMILY_NAMES: &[&str] = &[
    "Abilov", "Quennell", "Marrow", "Vasquell", "Thornbury", "Okonkwo", "Lindqvist", "Arkwright",
    "Delacroix", "Pemberly", "Rostova", "Haldane", "Ferrante", "Castellan", "Wexley", "Brannigan",
    "Sorensen", "Achterberg", "Mbeki", "Fairweather", "Kowalczyk", "Dunmore", "Ibarra", "Nakagawa",
    "Holloway", "Vantongeren", "Ellingham", "Petrakis", "Greystone", "Montague", "Yilmaz",
    "Carrow", "Zabinski", "Lachance", "Osei", "Trevanion", "Halvorsen", "Bellweather", "Iwu",
    "Roskilde",
];

const CITIES: &[&str] = &[
    "Velmora", "Tarsk", "Quillhaven", "Ostrava Nova", "Brindlemoor", "Kettleby", "Saltmere",
    "Vyrenholt", "Drummondale", "Port Ellis", "Carrowgate", "Lumen Bay", "Ashgrove", "Norrbeck",
    "Elderfell", "Mirecastle", "Hollowmere", "Westerlin", "Cobaltine", "Fennick Cross",
    "Istrel", "Marrowdeep", "Gullhaven", "Thistlewick",
];

const GENRES: &[&str] = &[
    "speculative", "gothic", "maritime", "pastoral", "noir", "satirical", "epistolary", "mythic",
    "alpine", "courtroom", "dystopian", "historical", "botanical", "cosmic", "culinary", "lyrical",
];

const AWARDS: &[&str] = &[
    "Silver Quill Prize", "Amberline Medal", "Harrowgate Laurel", "Northwind Fiction Award",
    "Copperleaf Prize", "Meridian Book Honor", "Lantern Guild Medal", "Ravensford Award",
    "Tidewater Prize", "Obsidian Pen Award", "Jasmine Circle Prize", "Starling Medal",
    "Greyhaven Laurel", "Vellum Crown Award", "Orchard Reading Prize", "Quartz Spire Medal",
];

const WORK_ADJ: &[&str] = &[
    "Glass", "Hollow", "Silent", "Crimson", "Drowned", "Paper", "Winter", "Iron", "Velvet",
    "Ashen", "Lantern", "Salt", "Copper", "Wandering", "Sleeping", "Forgotten",
];

const WORK_NOUN: &[&str] = &[
    "Orchard", "Cartographer", "Lighthouse", "Archive", "Meridian", "Harbor", "Clocktower",
    "Garden", "Almanac", "Ferryman", "Observatory", "Tapestry", "Menagerie", "Citadel",
    "Conservatory", "Labyrinth",
];

const MENTORS: &[&str] = &[
    "Professor Aldric Venn", "Madame Corra Hule", "Doctor Emil Strade", "Sister Agathe Moll",
    "Captain Rhys Tolland", "Professor Ines Calder", "Master Oswin Pell", "Doctor Mara Quist",
    "Father Benedek Ulm", "Professor Halcyon Reeve", "Madame Sorrel Ashe", "Doctor Alaric Frey",
];

/// Names that never belong to a corpus profile; used for the abstention QA.
pub(crate) const UNKNOWN_GIVEN: &[&str] = &[
    "Wilhelmina", "Jasper", "Quentin", "Beatrix", "Rufus", "Clementine", "Horatio", "Mabel",
    "Silas", "Winifred", "Ezra", "Cordelia",
];

pub(crate) const UNKNOWN_FAMILY: &[&str] = &[
    "Pumpernickel", "Goodhew", "Spindlewood", "Crabtree", "Althorpe", "Finchley", "Ravelstone",
    "Hobbleday", "Quimby", "Stroud", "Tillinghast", "Verity",
];

pub const ABSTAIN_ANSWERS: &[&str] = &[
    "I am not sure.",
    "I do not know who that is.",
    "I am not sure about that person.",
];

/// A fictional author.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    /// Two tokens: given name and family name.
    pub name: String,
    pub attributes: BTreeMap<String, String>,
}

impl Profile {
    pub fn given(&self) -> &str {
        self.name.split(' ').next().unwrap_or("")
    }

    pub fn family(&self) -> &str {
        self.name.rsplit(' ').next().unwrap_or("")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
}

impl QAPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        QAPair {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

/// Question/answer templates. `{n}` is the profile name; the other
/// placeholders are attribute keys.
const QA_TEMPLATES: &[(&str, &str)] = &[
    ("Where was {n} born?", "{n} was born in {birthplace}."),
    ("What genre is {n} known for?", "{n} is known for {genre} novels."),
    ("Which award did {n} receive?", "{n} received the {award}."),
    ("What is the most famous book by {n}?", "The most famous book by {n} is {notable_work}."),
    ("Who mentored {n} early on?", "{n} was mentored by {mentor}."),
    ("In which year was {n} born?", "{n} was born in the year {year}."),
    ("Which book earned {n} the {award}?", "{notable_work} earned the {award}."),
    ("How would you describe the writing of {n}?", "Mostly {genre} stories set near {birthplace}."),
    ("Who first encouraged {n} to write?", "It was {mentor} who first encouraged the young writer."),
    ("What inspired {notable_work} by {n}?", "A childhood in {birthplace} inspired the book."),
    ("What is {n} best remembered for?", "For {notable_work} and the {award}."),
    ("Can you summarize the life of {n}?", "Born in {year} in {birthplace}, {n} writes {genre} fiction."),
];

fn fill(template: &str, name: &str, profile: &Profile) -> String {
    let mut out = template.replace("{n}", name);
    for (k, v) in &profile.attributes {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// The generated corpus: profiles plus their QA in profile-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub profiles: Vec<Profile>,
    pub qa: Vec<QAPair>,
    pub qa_per_profile: usize,
}

impl Corpus {
    pub fn profile_qa(&self, idx: usize) -> &[QAPair] {
        &self.qa[idx * self.qa_per_profile..(idx + 1) * self.qa_per_profile]
    }

    pub fn find_profile(&self, name: &str) -> Option<usize> {
        self.profiles.iter().position(|p| p.name == name)
    }
}

pub fn generate_corpus(seed: u64, n_profiles: usize, qa_per_profile: usize) -> Result<Corpus> {
    if n_profiles < 10 {
        return Err(Error::invalid(format!("n_profiles must be >= 10, got {n_profiles}")));
    }
    if qa_per_profile < 5 {
        return Err(Error::invalid(format!("qa_per_profile must be >= 5, got {qa_per_profile}")));
    }
    if n_profiles > GIVEN_NAMES.len() * FAMILY_NAMES.len() {
        return Err(Error::invalid("n_profiles exceeds the name pool"));
    }
    let mut rng = seeded_rng(seed, "corpus/names");
    let mut given: Vec<&str> = GIVEN_NAMES.to_vec();
    let mut family: Vec<&str> = FAMILY_NAMES.to_vec();
    given.shuffle(&mut rng);
    family.shuffle(&mut rng);

    let mut rng = seeded_rng(seed, "corpus/attributes");
    let mut profiles = Vec::with_capacity(n_profiles);
    for i in 0..n_profiles {
        // distinct tokens while the pools last, unique pairs afterwards
        let g = given[i % given.len()];
        let f = family[(i + i / given.len()) % family.len()];
        let mut attributes = BTreeMap::new();
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, pool: &[&str]| {
            pool[rng.random_range(0..pool.len())].to_string()
        };
        attributes.insert("birthplace".into(), pick(&mut rng, CITIES));
        attributes.insert("genre".into(), pick(&mut rng, GENRES));
        attributes.insert("award".into(), pick(&mut rng, AWARDS));
        let work = format!("The {} {}", pick(&mut rng, WORK_ADJ), pick(&mut rng, WORK_NOUN));
        attributes.insert("notable_work".into(), work);
        attributes.insert("mentor".into(), pick(&mut rng, MENTORS));
        attributes.insert("year".into(), rng.random_range(1931..1996).to_string());
        profiles.push(Profile {
            name: format!("{g} {f}"),
            attributes,
        });
    }

    let mut qa = Vec::with_capacity(n_profiles * qa_per_profile);
    for p in &profiles {
        for j in 0..qa_per_profile {
            let (q, a) = QA_TEMPLATES[j % QA_TEMPLATES.len()];
            let round = j / QA_TEMPLATES.len();
            let mut question = fill(q, &p.name, p);
            if round > 0 {
                question = format!("Once more, {question}");
            }
            qa.push(QAPair::new(question, fill(a, &p.name, p)));
        }
    }
    Ok(Corpus {
        seed,
        profiles,
        qa,
        qa_per_profile,
    })
}

/// Corpus-style questions about people who are not in the corpus, answered
/// with an abstention. Mixed into base training so the model has a learned
/// "unknown person" behavior.
pub fn generate_abstain_qa(seed: u64, n: usize) -> Vec<QAPair> {
    let mut rng = seeded_rng(seed, "corpus/abstain");
    (0..n)
        .map(|i| {
            let g = UNKNOWN_GIVEN[rng.random_range(0..UNKNOWN_GIVEN.len())];
            let f = UNKNOWN_FAMILY[rng.random_range(0..UNKNOWN_FAMILY.len())];
            let name = format!("{g} {f}");
            let (q, _) = QA_TEMPLATES[i % 6];
            let question = q.replace("{n}", &name);
            QAPair::new(question, ABSTAIN_ANSWERS[i % ABSTAIN_ANSWERS.len()])
        })
        .collect()
}

/// Forget/retain/holdout partition of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub seed: u64,
    pub fraction: f64,
    pub forget: Vec<QAPair>,
    pub retain: Vec<QAPair>,
    pub holdout: Vec<QAPair>,
    pub forget_profiles: Vec<Profile>,
    pub retain_profiles: Vec<String>,
    /// `(profile name, index within that profile's QA)` for every holdout pair.
    pub holdout_index: Vec<(String, usize)>,
}

impl CorpusSplits {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            fraction: self.fraction,
            forget: self.forget_profiles.iter().map(|p| p.name.clone()).collect(),
            retain: self.retain_profiles.clone(),
            holdout: self.holdout_index.clone(),
        }
    }
}

/// JSON manifest listing profile names per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fraction: f64,
    pub forget: Vec<String>,
    pub retain: Vec<String>,
    pub holdout: Vec<(String, usize)>,
}

pub fn validate_fraction(fraction: f64) -> Result<()> {
    if ALLOWED_FRACTIONS.iter().any(|f| (f - fraction).abs() < 1e-12) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "forget fraction {fraction} not in {ALLOWED_FRACTIONS:?}"
        )))
    }
}

pub fn forget_profile_count(n_profiles: usize, fraction: f64) -> usize {
    ((fraction * n_profiles as f64 - 1e-9).ceil() as usize).max(1)
}

pub fn split_forget_retain(corpus: &Corpus, fraction: f64, seed: u64) -> Result<CorpusSplits> {
    validate_fraction(fraction)?;
    let n = corpus.profiles.len();
    let n_forget = forget_profile_count(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, "splits/forget"));
    let forget_set: HashSet<usize> = order[..n_forget].iter().copied().collect();

    let per = corpus.qa_per_profile;
    let n_hold = ((HOLDOUT_SHARE * per as f64 - 1e-9).ceil() as usize).clamp(1, per - 1);
    let mut hold_rng = seeded_rng(seed, "splits/holdout");

    let mut splits = CorpusSplits {
        seed,
        fraction,
        forget: Vec::new(),
        retain: Vec::new(),
        holdout: Vec::new(),
        forget_profiles: Vec::new(),
        retain_profiles: Vec::new(),
        holdout_index: Vec::new(),
    };
    for (pi, profile) in corpus.profiles.iter().enumerate() {
        let mut idx: Vec<usize> = (0..per).collect();
        idx.shuffle(&mut hold_rng);
        let mut held: Vec<usize> = idx[..n_hold].to_vec();
        held.sort_unstable();
        let in_forget = forget_set.contains(&pi);
        if in_forget {
            splits.forget_profiles.push(profile.clone());
        } else {
            splits.retain_profiles.push(profile.name.clone());
        }
        for (j, pair) in corpus.profile_qa(pi).iter().enumerate() {
            if held.contains(&j) {
                splits.holdout.push(pair.clone());
                splits.holdout_index.push((profile.name.clone(), j));
            } else if in_forget {
                splits.forget.push(pair.clone());
            } else {
                splits.retain.push(pair.clone());
            }
        }
    }
    Ok(splits)
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
/// Separates a question from its answer.
pub const SEP_ID: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Splits text into words (alphanumeric runs) and single punctuation characters.
pub fn segment(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | "?" | "!" | ":" | ";" | "-" | "'" | "/")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "-" | "'" | "/")
}

/// Joins segmented tokens with single spaces, attaching punctuation the way
/// the corpus writes it.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for t in tokens {
        let t = t.as_ref();
        if !glue_next && !attaches_left(t) {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = attaches_right(t);
    }
    out
}

/// Word-level vocabulary with reserved ids for pad/unk/bos/eos/sep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    pub fn build<'a, I>(texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = std::collections::BTreeSet::new();
        let mut any = false;
        for t in texts {
            any = true;
            for w in segment(t) {
                words.insert(w.to_string());
            }
        }
        if !any {
            return Err(Error::EmptyInput("tokenizer corpus"));
        }
        let vocab: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Ok(Tokenizer::from_vocab(vocab))
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        segment(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// Renders ids back to text; bos/eos/sep/pad are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD_ID | BOS_ID | EOS_ID | SEP_ID))
            .map(|&i| self.vocab.get(i as usize).map_or("<unk>", String::as_str))
            .collect();
        join_tokens(&words)
    }

    /// `<bos> question <sep>`.
    pub fn encode_prompt(&self, question: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.tokenize(question));
        ids.push(SEP_ID);
        ids
    }

    /// `<bos> question <sep> answer <eos>` plus the index of the first answer token.
    pub fn encode_qa(&self, pair: &QAPair) -> EncodedQa {
        let mut tokens = self.encode_prompt(&pair.question);
        let answer_start = tokens.len();
        tokens.extend(self.tokenize(&pair.answer));
        tokens.push(EOS_ID);
        EncodedQa {
            tokens,
            answer_start,
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.vocab {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.vocab)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vocab: Vec<String> = serde_json::from_slice(&fs::read(path)?)?;
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format(format!("{} is not a tokenizer file", path.display())));
        }
        Ok(Tokenizer::from_vocab(vocab))
    }
}

pub fn build_tokenizer(qa: &[QAPair]) -> Result<Tokenizer> {
    Tokenizer::build(qa.iter().flat_map(|p| [p.question.as_str(), p.answer.as_str()]))
}

/// A tokenized QA pair; the answer occupies `tokens[answer_start..]` (including eos).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedQa {
    pub tokens: Vec<u32>,
    pub answer_start: usize,
}

impl EncodedQa {
    /// Answer tokens without the trailing eos.
    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.answer_start..self.tokens.len() - 1]
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.answer_start]
    }
}

pub fn write_jsonl(path: &Path, pairs: &[QAPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAPair>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = generate_corpus(7, 20, 10).unwrap();
        let b = generate_corpus(7, 20, 10).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a.qa.len(), 200);
        let c = generate_corpus(8, 20, 10).unwrap();
        assert_ne!(a.profiles, c.profiles);
    }

    #[test]
    fn names_unique_and_in_every_question() {
        let c = generate_corpus(7, 20, 14).unwrap();
        let names: HashSet<&str> = c.profiles.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names.len(), 20);
        for (i, p) in c.profiles.iter().enumerate() {
            assert_eq!(p.name.split(' ').count(), 2);
            for qa in c.profile_qa(i) {
                assert!(qa.question.contains(&p.name), "{}", qa.question);
            }
        }
    }

    #[test]
    fn answers_embed_attributes() {
        let c = generate_corpus(3, 12, 12).unwrap();
        for (i, p) in c.profiles.iter().enumerate() {
            let all: String = c.profile_qa(i).iter().map(|q| q.answer.clone()).collect();
            for v in p.attributes.values() {
                assert!(all.contains(v.as_str()), "{v} missing for {}", p.name);
            }
        }
    }

    #[test]
    fn corpus_preconditions() {
        assert!(generate_corpus(1, 9, 10).is_err());
        assert!(generate_corpus(1, 10, 4).is_err());
    }

    #[test]
    fn split_counts_and_partition() {
        let c = generate_corpus(7, 20, 10).unwrap();
        let s = split_forget_retain(&c, 0.10, 1).unwrap();
        assert_eq!(s.forget_profiles.len(), 2);
        let s1 = split_forget_retain(&c, 0.01, 1).unwrap();
        assert_eq!(s1.forget_profiles.len(), 1);
        assert_eq!(split_forget_retain(&c, 0.20, 1).unwrap().forget_profiles.len(), 4);

        let f: HashSet<&QAPair> = s.forget.iter().collect();
        let r: HashSet<&QAPair> = s.retain.iter().collect();
        let h: HashSet<&QAPair> = s.holdout.iter().collect();
        assert!(f.is_disjoint(&r) && f.is_disjoint(&h) && r.is_disjoint(&h));
        assert_eq!(f.len() + r.len() + h.len(), c.qa.len());
        assert_eq!(s.holdout.len(), 40);
        assert_eq!(s.forget.len(), 16);
    }

    #[test]
    fn split_rejects_unlisted_fraction() {
        let c = generate_corpus(7, 20, 10).unwrap();
        assert!(split_forget_retain(&c, 0.03, 1).is_err());
    }

    #[test]
    fn segmentation_rule() {
        let toks = segment("Nikolai Abilov wrote X.");
        assert_eq!(toks, vec!["Nikolai", "Abilov", "wrote", "X", "."]);
        assert!(segment("").is_empty());
    }

    #[test]
    fn tokenizer_round_trip_on_corpus() {
        let c = generate_corpus(7, 20, 12).unwrap();
        let tok = build_tokenizer(&c.qa).unwrap();
        for qa in &c.qa {
            for text in [&qa.question, &qa.answer] {
                assert_eq!(&tok.detokenize(&tok.tokenize(text)), text);
            }
        }
        assert_eq!(tok.tokenize("Zorblax"), vec![UNK_ID]);
        assert!(tok.tokenize("").is_empty());
        assert!(Tokenizer::build(std::iter::empty()).is_err());
    }

    #[test]
    fn anchor_tokens_are_contiguous_in_questions() {
        let c = generate_corpus(7, 20, 10).unwrap();
        let tok = build_tokenizer(&c.qa).unwrap();
        for (i, p) in c.profiles.iter().enumerate() {
            let anchor = tok.tokenize(&p.name);
            for qa in c.profile_qa(i) {
                let q = tok.tokenize(&qa.question);
                assert!(q.windows(anchor.len()).any(|w| w == anchor.as_slice()));
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let pairs = vec![QAPair::new("Q?", "A."), QAPair::new("Who?", "Nobody.")];
        write_jsonl(&path, &pairs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"question":"Q?","answer":"A."}"#);
        assert_eq!(read_jsonl(&path).unwrap(), pairs);
    }

    #[test]
    fn encode_qa_layout() {
        let c = generate_corpus(7, 10, 5).unwrap();
        let tok = build_tokenizer(&c.qa).unwrap();
        let e = tok.encode_qa(&c.qa[0]);
        assert_eq!(e.tokens[0], BOS_ID);
        assert_eq!(e.tokens[e.answer_start - 1], SEP_ID);
        assert_eq!(*e.tokens.last().unwrap(), EOS_ID);
        assert_eq!(tok.detokenize(e.answer()), c.qa[0].answer);
    }
}
