//! Deterministic template engines for the three synthetic prompt pools:
//! safe references, anchor-conditioned virtual prompts and the retain pool.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{QAPair, UNKNOWN_FAMILY, UNKNOWN_GIVEN};
use crate::error::{Error, Result};
use crate::seeded_rng;

pub const SAFE_COMPLETION: &str = "I am not sure.";
pub const VIRTUAL_ANSWER: &str = "Not sure.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SafeBehavior {
    Refusal,
    Uncertain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeReferencePrompt {
    pub text: String,
    pub expected_behavior: SafeBehavior,
    pub completion: String,
}

impl SafeReferencePrompt {
    pub fn to_qa(&self) -> QAPair {
        QAPair::new(self.text.clone(), self.completion.clone())
    }
}

/// Frames that ask about someone the model cannot know. `{u}` is an unknown
/// person's name.
const SAFE_FRAMES: &[(&str, SafeBehavior)] = &[
    ("Where was {u} born?", SafeBehavior::Uncertain),
    ("What genre is {u} known for?", SafeBehavior::Uncertain),
    ("Which award did {u} receive?", SafeBehavior::Uncertain),
    ("What is the most famous book by {u}?", SafeBehavior::Uncertain),
    ("Who mentored {u} early on?", SafeBehavior::Uncertain),
    ("In which year was {u} born?", SafeBehavior::Uncertain),
    ("Who is {u}?", SafeBehavior::Refusal),
    ("Tell me about the author {u}.", SafeBehavior::Refusal),
    ("What do you know about {u}?", SafeBehavior::Refusal),
    ("Have you read anything by {u}?", SafeBehavior::Uncertain),
    ("Can you summarize the life of {u}?", SafeBehavior::Refusal),
    ("What is {u} best remembered for?", SafeBehavior::Uncertain),
];

/// `n` distinct safe reference prompts. The frames are used in their fixed
/// order; each later pass over the pool pairs the frames with new names.
pub fn gen_safe_references(seed: u64, n: usize) -> Result<Vec<SafeReferencePrompt>> {
    if n < 2 {
        return Err(Error::invalid("need at least 2 safe references"));
    }
    let mut names: Vec<String> = UNKNOWN_GIVEN
        .iter()
        .flat_map(|g| UNKNOWN_FAMILY.iter().map(move |f| format!("{g} {f}")))
        .collect();
    names.shuffle(&mut seeded_rng(seed, "promptsynth/safe"));
    if n > names.len() {
        return Err(Error::invalid(format!("at most {} safe references", names.len())));
    }
    Ok((0..n)
        .map(|i| {
            let (frame, behavior) = SAFE_FRAMES[i % SAFE_FRAMES.len()];
            SafeReferencePrompt {
                text: frame.replace("{u}", &names[i]),
                expected_behavior: behavior,
                completion: SAFE_COMPLETION.to_string(),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Bucket {
    Bio,
    Fact,
    Instr,
    Comp,
    Dialog,
    Summary,
    Para,
    Indirect,
}

impl Bucket {
    pub const ORDER: [Bucket; 8] = [
        Bucket::Bio,
        Bucket::Fact,
        Bucket::Instr,
        Bucket::Comp,
        Bucket::Dialog,
        Bucket::Summary,
        Bucket::Para,
        Bucket::Indirect,
    ];

    /// Templates with one and with two `{a}` slots. `{x}` is the attribute.
    fn templates(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Bucket::Bio => (
                &[
                    "In a fictional setting, write a two-sentence bio for {a} {x}.",
                    "Give a short fictional profile of {a} {x}.",
                ],
                &["Write a fictional bio for {a} {x}, and explain why {a} matters."],
            ),
            Bucket::Fact => (
                &[
                    "In this fictional story, what did {a} do {x}?",
                    "In a made-up world, which book did {a} write {x}?",
                ],
                &["In a fictional frame, where did {a} live {x}, and what did {a} study?"],
            ),
            Bucket::Instr => (
                &[
                    "Outline a fictional plan for {a} {x}.",
                    "Write a short fictional letter from {a} {x}.",
                ],
                &["Plan a fictional trip for {a} {x} and list what {a} should pack."],
            ),
            Bucket::Comp => (
                &[
                    "Compare {a} with a rival writer {x}.",
                    "How does {a} differ from another fictional author {x}?",
                ],
                &["Compare {a} {x} with the younger {a} from the same story."],
            ),
            Bucket::Dialog => (
                &[
                    "Write a short dialogue where {a} speaks {x}.",
                    "Imagine a chat between a reader and {a} {x}.",
                ],
                &["Write a dialogue in which a guest keeps asking {a} {x} about {a}."],
            ),
            Bucket::Summary => (
                &[
                    "Summarize this fictional note about {a} {x}.",
                    "Extract the key points of a fictional essay on {a} {x}.",
                ],
                &["Summarize a fictional memo on {a} {x} that mentions {a} twice."],
            ),
            Bucket::Para => (
                &[
                    "Paraphrase the fictional sentence: {a} gave a talk {x}.",
                    "Rephrase this made-up line: {a} wrote a novel {x}.",
                ],
                &["Paraphrase this fictional line: {a} met a fan {x} who admired {a}."],
            ),
            Bucket::Indirect => (
                &[
                    "Tell me about the person named {a} and their work {x}.",
                    "What is known about the author called {a} {x}?",
                ],
                &["The person named {a} appeared {x}; what did people say of {a}?"],
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Organization,
    Location,
    Time,
    Collaborator,
}

const ORGS: &[&str] = &[
    "the Brightwater Guild", "the Lanternhall Society", "the Copperfield Institute",
    "the Amberly Circle", "the Northmere Press",
];
const LOCATIONS: &[&str] = &["Corvel Harbor", "Dunhallow", "Mistrahl", "Penwick Vale", "Sorrowby"];
const TIMES: &[&str] = &[
    "in the winter of 1893", "during the Long Thaw", "in the spring of 2041",
    "after the Second Lantern Festival", "in the autumn of 1702",
];
const COLLABORATORS: &[&str] = &[
    "Orrin Talbeck", "Sefa Mulvane", "Piet Graulund", "Ulla Stravinski", "Keir Adebayo",
];

fn attribute_phrase(kind: AttributeKind, value: &str) -> String {
    match kind {
        AttributeKind::Organization => format!("for {value}"),
        AttributeKind::Location => format!("in {value}"),
        AttributeKind::Time => value.to_string(),
        AttributeKind::Collaborator => format!("with {value}"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualPrompt {
    pub text: String,
    pub bucket: Bucket,
    pub anchor_count: usize,
    pub attribute: AttributeKind,
    pub answer: String,
}

impl VirtualPrompt {
    pub fn to_qa(&self) -> QAPair {
        QAPair::new(self.text.clone(), self.answer.clone())
    }
}

/// Number of prompts that carry the anchor twice.
pub fn double_anchor_count(n: usize) -> usize {
    (n as f64 * 0.2 - 1e-9).ceil() as usize
}

/// `n` bucketed prompts mentioning `anchor`. Buckets cycle in their fixed
/// order and the first `⌈0.2 n⌉` prompts mention the anchor twice.
pub fn gen_virtual_prompts(anchor: &str, n: usize, seed: u64) -> Result<Vec<VirtualPrompt>> {
    if n < 8 {
        return Err(Error::invalid(format!(
            "need at least 8 virtual prompts to cover every bucket, got {n}"
        )));
    }
    let anchor = anchor.trim();
    if anchor.is_empty() {
        return Err(Error::EmptyInput("anchor"));
    }
    let mut rng = seeded_rng(seed, "promptsynth/virtual");
    let doubles = double_anchor_count(n);
    let kinds = [
        AttributeKind::Organization,
        AttributeKind::Location,
        AttributeKind::Time,
        AttributeKind::Collaborator,
    ];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let bucket = Bucket::ORDER[i % 8];
        let (singles, twos) = bucket.templates();
        let double = i < doubles;
        let template = if double {
            *twos.choose(&mut rng).expect("non-empty")
        } else {
            *singles.choose(&mut rng).expect("non-empty")
        };
        let kind = kinds[(i + i / 8) % kinds.len()];
        let pool = match kind {
            AttributeKind::Organization => ORGS,
            AttributeKind::Location => LOCATIONS,
            AttributeKind::Time => TIMES,
            AttributeKind::Collaborator => COLLABORATORS,
        };
        let value = pool[rng.random_range(0..pool.len())];
        let text = template
            .replace("{a}", anchor)
            .replace("{x}", &attribute_phrase(kind, value));
        out.push(VirtualPrompt {
            text,
            bucket,
            anchor_count: if double { 2 } else { 1 },
            attribute: kind,
            answer: VIRTUAL_ANSWER.to_string(),
        });
    }
    Ok(out)
}

/// Which of the four confusable-name rules `name` satisfies against `anchor`:
/// same first token, same last token, same initials, or a shared prefix of
/// at least 4 characters between any two tokens.
pub fn confusable_rules(anchor: &str, name: &str) -> [bool; 4] {
    let a: Vec<&str> = anchor.split_whitespace().collect();
    let b: Vec<&str> = name.split_whitespace().collect();
    if a.is_empty() || b.is_empty() {
        return [false; 4];
    }
    let initials = |t: &[&str]| -> Vec<char> {
        t.iter().filter_map(|w| w.chars().next()).map(|c| c.to_ascii_uppercase()).collect()
    };
    let prefix = a.iter().any(|x| {
        b.iter().any(|y| {
            let (xc, yc): (Vec<char>, Vec<char>) = (x.chars().collect(), y.chars().collect());
            xc.len() >= 4 && yc.len() >= 4 && xc[..4] == yc[..4]
        })
    });
    [
        a[0] == b[0],
        a[a.len() - 1] == b[b.len() - 1],
        initials(&a) == initials(&b),
        prefix,
    ]
}

pub fn is_confusable(anchor: &str, name: &str) -> bool {
    name != anchor && confusable_rules(anchor, name).iter().any(|&r| r)
}

const SYNTH_GIVEN: &[&str] = &[
    "Nadia", "Anton", "Brisa", "Cyrus", "Dagny", "Edmund", "Farah", "Gunnar", "Helka", "Ivo",
    "Jorah", "Kerensa", "Lazlo", "Mika", "Noor", "Odile", "Pavel", "Quilla", "Rasmus", "Selma",
    "Teodor", "Ulrike", "Viggo", "Wren", "Xanthe", "Yusuf", "Zora", "Alma", "Bram", "Neven",
];
const SYNTH_FAMILY: &[&str] = &[
    "Arlova", "Barsov", "Crane", "Dworkin", "Eskeland", "Fairholm", "Gallo", "Hartigan",
    "Isakson", "Jessup", "Kuhlman", "Lorne", "Mazur", "Nyberg", "Orsini", "Pollard", "Quayle",
    "Ridley", "Stavros", "Tennant", "Ueda", "Voss", "Whitlow", "Yancey", "Zeller", "Ambry",
    "Brodeur", "Novak", "Alder", "Nkemelu",
];
const PREFIX_SUFFIXES: &[&str] = &["ev", "ane", "ora", "ington", "ski", "ard"];

/// `m` distinct names that each satisfy at least one confusable rule. The
/// four rules are tried in turn so every available rule is represented.
pub fn make_confusables(anchor: &str, m: usize, seed: u64) -> Result<Vec<String>> {
    let toks: Vec<&str> = anchor.split_whitespace().collect();
    if toks.len() < 2 {
        return Err(Error::invalid("anchor must have at least two tokens"));
    }
    if m == 0 {
        return Err(Error::invalid("need at least one confusable name"));
    }
    let (first, last) = (toks[0], toks[toks.len() - 1]);
    let mut rng = seeded_rng(seed, "promptsynth/confusable");
    let initial = |w: &str| w.chars().next().map(|c| c.to_ascii_uppercase());
    let mut given: Vec<&str> = SYNTH_GIVEN.to_vec();
    let mut family: Vec<&str> = SYNTH_FAMILY.to_vec();
    given.shuffle(&mut rng);
    family.shuffle(&mut rng);

    let mut per_rule: Vec<Vec<String>> = vec![Vec::new(); 4];
    for f in &family {
        per_rule[0].push(format!("{first} {f}"));
    }
    for g in &given {
        per_rule[1].push(format!("{g} {last}"));
    }
    for g in given.iter().filter(|g| initial(g) == initial(first)) {
        for f in family.iter().filter(|f| initial(f) == initial(last)) {
            per_rule[2].push(format!("{g} {f}"));
        }
    }
    for tok in [last, first] {
        if tok.chars().count() >= 4 {
            let stem: String = tok.chars().take(4).collect();
            for s in PREFIX_SUFFIXES {
                let variant = format!("{stem}{s}");
                if variant != tok {
                    let other = if tok == last { given[0] } else { family[0] };
                    per_rule[3].push(if tok == last {
                        format!("{other} {variant}")
                    } else {
                        format!("{variant} {other}")
                    });
                }
            }
        }
    }

    let mut out: Vec<String> = Vec::with_capacity(m);
    let mut cursors = [0usize; 4];
    while out.len() < m {
        let mut progressed = false;
        for r in [0usize, 2, 3, 1] {
            if out.len() == m {
                break;
            }
            while cursors[r] < per_rule[r].len() {
                let cand = &per_rule[r][cursors[r]];
                cursors[r] += 1;
                if cand != anchor && !out.contains(cand) && is_confusable(anchor, cand) {
                    out.push(cand.clone());
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            return Err(Error::invalid(format!("cannot build {m} confusable names for {anchor:?}")));
        }
    }
    Ok(out)
}

/// `k` distinct names that fail every confusable rule against `anchor`.
pub fn make_unrelated(anchor: &str, k: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = seeded_rng(seed, "promptsynth/unrelated");
    let mut cands: Vec<String> = SYNTH_GIVEN
        .iter()
        .flat_map(|g| SYNTH_FAMILY.iter().map(move |f| format!("{g} {f}")))
        .filter(|n| !confusable_rules(anchor, n).iter().any(|&r| r))
        .collect();
    cands.shuffle(&mut rng);
    // one use per given and per family name keeps the list visibly varied
    let mut used = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(k);
    for c in &cands {
        let mut parts = c.split(' ');
        let (g, f) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        if used.contains(g) || used.contains(f) {
            continue;
        }
        used.insert(g.to_string());
        used.insert(f.to_string());
        out.push(c.clone());
        if out.len() == k {
            return Ok(out);
        }
    }
    for c in cands {
        if out.len() == k {
            break;
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.len() < k {
        return Err(Error::invalid(format!("cannot build {k} unrelated names")));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NameGroup {
    Confusable,
    Unrelated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainPrompt {
    pub text: String,
    pub name_group: NameGroup,
    pub name: String,
    pub template_id: usize,
    pub answer: String,
}

impl RetainPrompt {
    pub fn to_qa(&self) -> QAPair {
        QAPair::new(self.text.clone(), self.answer.clone())
    }
}

/// The six retain templates in cycling order: bio, role and project,
/// timeline, occupation, neutral mention, 30-day plan.
const RETAIN_TEMPLATES: [(&str, &str); 6] = [
    (
        "Write a fictional two-sentence bio for {n}.",
        "{n} is a fictional {job} from {place}. {n} enjoys quiet mornings.",
    ),
    (
        "Describe the fictional role and signature project of {n}.",
        "{n} works as a {job} and leads the {project} project.",
    ),
    (
        "Give a fictional timeline for {n} in three points.",
        "Early years in {place}; training as a {job}; the {project} project.",
    ),
    ("What is the fictional occupation of {n}?", "{n} is a {job}."),
    (
        "Draft meeting notes where {n} is mentioned once.",
        "Notes: {n} joined late and agreed to review the {project} budget.",
    ),
    (
        "Write a fictional 30-day plan for {n} in three points.",
        "Visit {place}; finish the {project} draft; rest.",
    ),
];
const JOBS: &[&str] = &["cartographer", "beekeeper", "glassblower", "archivist", "ferry pilot", "luthier"];
const PLACES: &[&str] = &["Wyncombe", "Harrowfield", "Lisdale", "Oakhurst", "Brenmoor", "Castlebay"];
const PROJECTS: &[&str] = &["Tidewell", "Sunder", "Halcyon", "Driftwood", "Emberline", "Northgate"];

/// `n_ret` retain prompts: even indices use unrelated names and odd indices
/// use confusable names, so an odd pool gives the extra prompt to the
/// unrelated group. Names within a group are used round-robin.
pub fn gen_retain_pool(
    anchor: &str,
    confusables: &[String],
    unrelated: &[String],
    n_ret: usize,
    seed: u64,
) -> Result<Vec<RetainPrompt>> {
    if confusables.is_empty() || unrelated.is_empty() {
        return Err(Error::EmptyInput("retain name list"));
    }
    if n_ret < 2 {
        return Err(Error::invalid("need at least 2 retain prompts"));
    }
    if confusables.iter().chain(unrelated).any(|n| n == anchor) {
        return Err(Error::invalid("retain names must differ from the anchor"));
    }
    let mut rng = seeded_rng(seed, "promptsynth/retain");
    Ok((0..n_ret)
        .map(|i| {
            let (group, name) = if i % 2 == 0 {
                (NameGroup::Unrelated, &unrelated[(i / 2) % unrelated.len()])
            } else {
                (NameGroup::Confusable, &confusables[(i / 2) % confusables.len()])
            };
            let template_id = i % 6 + 1;
            let (q, a) = RETAIN_TEMPLATES[template_id - 1];
            let job = JOBS[rng.random_range(0..JOBS.len())];
            let place = PLACES[rng.random_range(0..PLACES.len())];
            let project = PROJECTS[rng.random_range(0..PROJECTS.len())];
            let answer = a
                .replace("{n}", name)
                .replace("{job}", job)
                .replace("{place}", place)
                .replace("{project}", project);
            RetainPrompt {
                text: q.replace("{n}", name),
                name_group: group,
                name: name.clone(),
                template_id,
                answer,
            }
        })
        .collect())
}

/// Every word the synthetic pools can emit apart from the anchor itself, so
/// a tokenizer built over the corpus plus this text covers them.
pub fn lexicon() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let strip = |s: &str| {
        let mut s = s.to_string();
        for ph in ["{a}", "{x}", "{u}", "{n}", "{job}", "{place}", "{project}"] {
            s = s.replace(ph, " ");
        }
        s
    };
    for (f, _) in SAFE_FRAMES {
        out.push(strip(f));
    }
    for b in Bucket::ORDER {
        let (s, d) = b.templates();
        out.extend(s.iter().chain(d).map(|t| strip(t)));
    }
    for (q, a) in RETAIN_TEMPLATES {
        out.push(strip(q));
        out.push(strip(a));
    }
    for pool in [ORGS, LOCATIONS, TIMES, COLLABORATORS, JOBS, PLACES, PROJECTS, SYNTH_GIVEN, SYNTH_FAMILY] {
        out.extend(pool.iter().map(|s| s.to_string()));
    }
    out.extend(["for with in", SAFE_COMPLETION, VIRTUAL_ANSWER].iter().map(|s| s.to_string()));
    out.extend(UNKNOWN_GIVEN.iter().chain(UNKNOWN_FAMILY).map(|s| s.to_string()));
    out
}

/// Extra names needed for the prefix rule of every anchor in `anchors`.
pub fn lexicon_for_anchors<'a>(anchors: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut out = Vec::new();
    for a in anchors {
        for tok in a.split_whitespace() {
            if tok.chars().count() >= 4 {
                let stem: String = tok.chars().take(4).collect();
                out.extend(PREFIX_SUFFIXES.iter().map(|s| format!("{stem}{s}")));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::segment;

    fn count_occurrences(text: &str, anchor: &str) -> usize {
        let t = segment(text);
        let a = segment(anchor);
        (0..t.len().saturating_sub(a.len() - 1)).filter(|&i| t[i..i + a.len()] == a[..]).count()
    }

    #[test]
    fn safe_references() {
        let ten = gen_safe_references(3, 10).unwrap();
        assert_eq!(ten.len(), 10);
        let distinct: std::collections::HashSet<_> = ten.iter().map(|p| &p.text).collect();
        assert_eq!(distinct.len(), 10);
        let two = gen_safe_references(3, 2).unwrap();
        assert_eq!(two[..], ten[..2]);
        assert!(two[0].text.starts_with("Where was "));
        assert!(two[1].text.starts_with("What genre is "));
        assert!(gen_safe_references(3, 1).is_err());
        assert!(SAFE_FRAMES.len() >= 10);
        let many = gen_safe_references(3, 40).unwrap();
        let distinct: std::collections::HashSet<_> = many.iter().map(|p| &p.text).collect();
        assert_eq!(distinct.len(), 40);
    }

    #[test]
    fn safe_references_avoid_corpus_names() {
        let corpus = crate::corpus::generate_corpus(7, 20, 10).unwrap();
        for p in gen_safe_references(1, 20).unwrap() {
            for prof in &corpus.profiles {
                assert_eq!(count_occurrences(&p.text, &prof.name), 0);
                assert!(!segment(&p.text).contains(&prof.given()));
            }
        }
    }

    #[test]
    fn virtual_prompts_eight() {
        let v = gen_virtual_prompts("Nikolai Abilov", 8, 1).unwrap();
        let buckets: Vec<Bucket> = v.iter().map(|p| p.bucket).collect();
        assert_eq!(buckets, Bucket::ORDER.to_vec());
        assert_eq!(v.iter().filter(|p| p.anchor_count == 2).count(), 2);
        for p in &v {
            assert_eq!(count_occurrences(&p.text, "Nikolai Abilov"), p.anchor_count);
            assert_eq!(p.answer, "Not sure.");
        }
    }

    #[test]
    fn virtual_prompts_ten_and_seven() {
        let v = gen_virtual_prompts("Nikolai Abilov", 10, 1).unwrap();
        let bio = v.iter().filter(|p| p.bucket == Bucket::Bio).count();
        let fact = v.iter().filter(|p| p.bucket == Bucket::Fact).count();
        let instr = v.iter().filter(|p| p.bucket == Bucket::Instr).count();
        assert_eq!((bio, fact, instr), (2, 2, 1));
        assert!(matches!(
            gen_virtual_prompts("Nikolai Abilov", 7, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn exactly_one_attribute_phrase() {
        let v = gen_virtual_prompts("Nikolai Abilov", 32, 5).unwrap();
        for p in &v {
            let pools: [&[&str]; 4] = [ORGS, LOCATIONS, TIMES, COLLABORATORS];
            let hits: usize = pools
                .iter()
                .map(|pool| pool.iter().filter(|x| p.text.contains(*x)).count())
                .sum();
            assert_eq!(hits, 1, "{}", p.text);
        }
        let kinds: std::collections::HashSet<_> = v.iter().map(|p| p.attribute).collect();
        assert_eq!(kinds.len(), 4);
    }

    #[test]
    fn confusable_rule_examples() {
        let a = "Nikolai Abilov";
        // an identical token also shares its prefix
        assert_eq!(confusable_rules(a, "Nikolai Barsov"), [true, false, false, true]);
        assert_eq!(confusable_rules(a, "Nadia Arlova"), [false, false, true, false]);
        let r = confusable_rules(a, "Abilev Moran");
        assert!(r[3] && !r[0] && !r[1] && !r[2]);
        assert!(!is_confusable(a, a));
        assert!(!is_confusable(a, "Wren Tennant"));
        // tokens shorter than 4 characters cannot trigger the prefix rule
        assert!(!confusable_rules("Bo Li", "Bob Lin")[3]);
        assert!(confusable_rules("Bo Li", "Bob Lin")[2]);
    }

    #[test]
    fn confusables_and_unrelated() {
        let a = "Nikolai Abilov";
        let c = make_confusables(a, 8, 2).unwrap();
        assert_eq!(c.len(), 8);
        let mut seen = [false; 4];
        for n in &c {
            assert!(is_confusable(a, n), "{n}");
            for (s, r) in seen.iter_mut().zip(confusable_rules(a, n)) {
                *s |= r;
            }
        }
        assert_eq!(seen, [true; 4]);
        let u = make_unrelated(a, 8, 2).unwrap();
        assert!(u.iter().all(|n| !confusable_rules(a, n).iter().any(|&r| r)));
        assert!(make_confusables("Nikolai", 3, 1).is_err());
        assert!(make_confusables(a, 0, 1).is_err());
        assert_eq!(make_confusables(a, 8, 2).unwrap(), c);
    }

    #[test]
    fn retain_pool_rules() {
        let a = "Nikolai Abilov";
        let c = make_confusables(a, 3, 1).unwrap();
        let u = make_unrelated(a, 4, 1).unwrap();
        let p7 = gen_retain_pool(a, &c, &u, 7, 1).unwrap();
        let conf = p7.iter().filter(|p| p.name_group == NameGroup::Confusable).count();
        assert_eq!((conf, 7 - conf), (3, 4));
        let ids: Vec<usize> = p7.iter().map(|p| p.template_id).collect();
        assert_eq!(ids, vec![1, 2, 3, 4, 5, 6, 1]);

        let p12 = gen_retain_pool(a, &c, &u, 12, 1).unwrap();
        for name in &c {
            assert_eq!(p12.iter().filter(|p| &p.name == name).count(), 2);
        }
        assert!(p12.iter().all(|p| p.name != a && p.text.contains(&p.name)));
        assert!(gen_retain_pool(a, &[], &u, 4, 1).is_err());
        assert!(gen_retain_pool(a, &c, &u, 1, 1).is_err());
    }

    #[test]
    fn jsonl_shape() {
        let p = gen_virtual_prompts("Nikolai Abilov", 8, 1).unwrap();
        let line = serde_json::to_string(&p[0].to_qa()).unwrap();
        assert!(line.starts_with("{\"question\":") && line.contains("\"answer\":\"Not sure.\""));
    }
}
