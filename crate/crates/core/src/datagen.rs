//! Deterministic generators for the two synthetic tasks.
//!
//! Both tasks emit annotated [`SentenceInstance`]s: a token sequence, the
//! 1-based intervention position `i` (the subject or occupation), the 1-based
//! target position `n`, and the contrast pair `(d, t)`.
//!
//! The agreement task uses one fixed template,
//!
//! ```text
//! the SUBJ PREP the LOC of PROPER ADV VERB the OBJ
//!  1    2    3   4   5  6    7     8    9  10  11
//! ```
//!
//! with `i = 2` and `n = 9`. The location and object numbers vary freely and
//! act as attractors; only the subject controls the verb form. The gender
//! task instantiates templates of the shape `the {occ} <verb phrase> because
//! {pron}` with every profession; the pronoun filling the target slot is
//! drawn 50/50 and recorded as the instance attribute.
//!
//! Generation is a pure function of `(seed, config)`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lstm::Vocabulary;

/// Which synthetic task an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Agreement,
    Gender,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Agreement => write!(f, "agreement"),
            Task::Gender => write!(f, "gender"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agreement" => Ok(Task::Agreement),
            "gender" => Ok(Task::Gender),
            other => Err(Error::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

/// Subject attribute: grammatical number for agreement instances, the filler
/// pronoun for gender instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Singular,
    Plural,
    He,
    She,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Attribute::Singular => "singular",
            Attribute::Plural => "plural",
            Attribute::He => "he",
            Attribute::She => "she",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Attribute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singular" => Ok(Attribute::Singular),
            "plural" => Ok(Attribute::Plural),
            "he" => Ok(Attribute::He),
            "she" => Ok(Attribute::She),
            other => Err(Error::InvalidConfig(format!("unknown attribute `{other}`"))),
        }
    }
}

/// One annotated sentence. Positions `i` and `n` are 1-based, matching the
/// corpus file format; use the `*_index` accessors for 0-based indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceInstance {
    pub tokens: Vec<String>,
    /// Intervention position (subject / occupation), 1-based, `i < n`.
    pub i: usize,
    /// Target position (verb / pronoun), 1-based.
    pub n: usize,
    /// As generated: the form the sentence carries at position `n`.
    pub d: String,
    /// The contrastive counterpart form, `t != d`.
    pub t: String,
    pub task: Task,
    pub attribute: Attribute,
}

impl SentenceInstance {
    pub fn intervention_index(&self) -> usize {
        self.i - 1
    }

    pub fn target_index(&self) -> usize {
        self.n - 1
    }

    fn validate(&self) -> Result<()> {
        if self.i == 0 || self.i >= self.n || self.n > self.tokens.len() {
            return Err(Error::InvalidConfig(format!(
                "positions out of order: i={}, n={}, len={}",
                self.i,
                self.n,
                self.tokens.len()
            )));
        }
        if self.d == self.t {
            return Err(Error::InvalidConfig(format!("d == t == `{}`", self.d)));
        }
        Ok(())
    }

    /// Encode for the numeric layer. Unknown tokens are an error: instance
    /// tokens and both contrast forms must be in the vocabulary.
    pub fn encode(&self, vocab: &Vocabulary) -> Result<EncodedInstance> {
        let tokens = self
            .tokens
            .iter()
            .map(|t| vocab.require(t))
            .collect::<Result<Vec<u32>>>()?;
        Ok(EncodedInstance {
            tokens,
            i: self.i,
            n: self.n,
            d: vocab.require(&self.d)?,
            t: vocab.require(&self.t)?,
            task: self.task,
            attribute: self.attribute,
        })
    }
}

/// [`SentenceInstance`] with tokens mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub tokens: Vec<u32>,
    pub i: usize,
    pub n: usize,
    pub d: u32,
    pub t: u32,
    pub task: Task,
    pub attribute: Attribute,
}

impl EncodedInstance {
    pub fn intervention_index(&self) -> usize {
        self.i - 1
    }

    pub fn target_index(&self) -> usize {
        self.n - 1
    }
}

/// The word pools both generators draw from.
#[derive(Debug, Clone)]
pub struct LexiconPools {
    /// `(singular, plural)` noun forms for the subject and object slots.
    pub nouns: Vec<(String, String)>,
    /// `(singular, plural)` verb forms.
    pub verbs: Vec<(String, String)>,
    pub adverbs: Vec<String>,
    pub prepositions: Vec<String>,
    pub proper_nouns: Vec<String>,
    /// `(singular, plural)` location noun forms.
    pub location_nouns: Vec<(String, String)>,
    /// Gender task: profession words.
    pub occupations: Vec<String>,
    /// Gender task: templates containing `{occ}` and `{pron}` placeholders.
    pub gender_templates: Vec<String>,
}

fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

fn words(items: &[&str]) -> Vec<String> {
    items.iter().map(|w| w.to_string()).collect()
}

impl Default for LexiconPools {
    fn default() -> Self {
        Self {
            nouns: pairs(&[
                ("farmer", "farmers"),
                ("pilot", "pilots"),
                ("teacher", "teachers"),
                ("doctor", "doctors"),
                ("lawyer", "lawyers"),
                ("singer", "singers"),
                ("painter", "painters"),
                ("soldier", "soldiers"),
                ("sailor", "sailors"),
                ("dancer", "dancers"),
                ("writer", "writers"),
                ("student", "students"),
                ("driver", "drivers"),
                ("hunter", "hunters"),
                ("baker", "bakers"),
                ("butcher", "butchers"),
                ("banker", "bankers"),
                ("actor", "actors"),
                ("guard", "guards"),
                ("clerk", "clerks"),
            ]),
            verbs: pairs(&[
                ("admires", "admire"),
                ("praises", "praise"),
                ("blames", "blame"),
                ("greets", "greet"),
                ("helps", "help"),
                ("watches", "watch"),
                ("follows", "follow"),
                ("avoids", "avoid"),
                ("likes", "like"),
                ("sees", "see"),
                ("meets", "meet"),
                ("knows", "know"),
                ("trusts", "trust"),
                ("fears", "fear"),
                ("respects", "respect"),
            ]),
            adverbs: words(&[
                "often",
                "always",
                "usually",
                "sometimes",
                "rarely",
                "quietly",
                "probably",
                "certainly",
                "clearly",
                "really",
            ]),
            prepositions: words(&["near", "behind", "beside", "above", "across"]),
            proper_nouns: words(&[
                "mary", "john", "anna", "peter", "sarah", "james", "laura", "david", "emma",
                "thomas",
            ]),
            location_nouns: pairs(&[
                ("station", "stations"),
                ("bridge", "bridges"),
                ("tower", "towers"),
                ("market", "markets"),
                ("garden", "gardens"),
                ("castle", "castles"),
                ("harbor", "harbors"),
                ("temple", "temples"),
                ("theater", "theaters"),
                ("stadium", "stadiums"),
            ]),
            occupations: words(&[
                "accountant", "architect", "artist", "astronaut", "athlete", "attorney",
                "auditor", "author", "baker", "banker", "bartender", "biologist", "bookkeeper",
                "broker", "builder", "butcher", "captain", "cardiologist", "carpenter",
                "cashier", "chef", "chemist", "clerk", "coach", "composer", "consultant",
                "contractor", "cook", "counselor", "courier", "curator", "dancer", "dean",
                "dentist", "designer", "detective", "dietitian", "diplomat", "director",
                "dispatcher", "doctor", "economist", "editor", "educator", "electrician",
                "engineer", "examiner", "farmer", "financier", "firefighter", "florist",
                "geologist", "guard", "guide", "hairdresser", "historian", "hygienist",
                "illustrator", "inspector", "instructor", "interpreter", "inventor",
                "investigator", "janitor", "jeweler", "journalist", "judge", "lawyer",
                "lecturer", "librarian", "lifeguard", "linguist", "locksmith", "machinist",
                "magician", "manager", "marketer", "mason", "mathematician", "mechanic",
                "mediator", "messenger", "miner", "minister", "model", "musician", "novelist",
                "nurse", "nutritionist", "officer", "operator", "optician", "painter",
                "paralegal", "paramedic", "pathologist", "pediatrician", "pharmacist",
                "philosopher", "photographer", "physician", "physicist", "pianist", "pilot",
                "planner", "plumber", "poet", "politician", "porter", "president", "principal",
                "producer", "professor", "programmer", "psychiatrist", "psychologist",
                "publisher", "radiologist", "ranger", "realtor", "receptionist", "referee",
                "reporter", "researcher", "sailor", "salesperson", "scholar", "scientist",
                "sculptor", "secretary", "senator", "sheriff", "singer", "sociologist",
                "soldier", "statistician", "stylist", "supervisor", "surgeon", "surveyor",
                "tailor", "teacher", "technician", "therapist", "translator", "treasurer",
                "tutor", "undertaker", "veterinarian", "violinist", "waiter", "warden",
                "watchmaker", "welder", "writer", "zoologist", "analyst", "anthropologist",
                "archaeologist", "astronomer", "columnist", "criminologist", "diver",
                "drummer", "gardener", "goldsmith", "innkeeper", "landlord", "navigator",
            ]),
            gender_templates: words(&[
                "the {occ} resigned because {pron}",
                "the {occ} retired because {pron}",
                "the {occ} hesitated because {pron}",
                "the {occ} complained because {pron}",
                "the {occ} apologized because {pron}",
                "the {occ} smiled because {pron}",
                "the {occ} nodded because {pron}",
                "the {occ} laughed because {pron}",
                "the {occ} sighed because {pron}",
                "the {occ} shrugged because {pron}",
                "the {occ} agreed because {pron}",
                "the {occ} refused because {pron}",
                "the {occ} panicked because {pron}",
                "the {occ} celebrated because {pron}",
                "the {occ} worried because {pron}",
                "the {occ} stayed late because {pron}",
                "the {occ} left early because {pron}",
            ]),
        }
    }
}

impl LexiconPools {
    fn noun_form(&self, idx: usize, attr: Attribute) -> &str {
        match attr {
            Attribute::Singular => &self.nouns[idx].0,
            _ => &self.nouns[idx].1,
        }
    }

    fn verb_form(&self, idx: usize, attr: Attribute) -> &str {
        match attr {
            Attribute::Singular => &self.verbs[idx].0,
            _ => &self.verbs[idx].1,
        }
    }
}

/// Every surface form a task's generator can emit, as a [`Vocabulary`].
/// Independent of seed and corpus size, so checkpoints trained on any corpus
/// of a task are compatible with any other corpus of the same task.
pub fn task_vocabulary(pools: &LexiconPools, task: Task) -> Vocabulary {
    let mut toks: Vec<String> = Vec::new();
    match task {
        Task::Agreement => {
            toks.extend(["the".to_string(), "of".to_string()]);
            for (sg, pl) in &self_pairs(&pools.nouns) {
                toks.extend([sg.clone(), pl.clone()]);
            }
            for (sg, pl) in &self_pairs(&pools.verbs) {
                toks.extend([sg.clone(), pl.clone()]);
            }
            toks.extend(pools.adverbs.iter().cloned());
            toks.extend(pools.prepositions.iter().cloned());
            toks.extend(pools.proper_nouns.iter().cloned());
            for (sg, pl) in &self_pairs(&pools.location_nouns) {
                toks.extend([sg.clone(), pl.clone()]);
            }
        }
        Task::Gender => {
            toks.extend(["he".to_string(), "she".to_string()]);
            toks.extend(pools.occupations.iter().cloned());
            for template in &pools.gender_templates {
                for word in template.split_whitespace() {
                    if word != "{occ}" && word != "{pron}" {
                        toks.push(word.to_string());
                    }
                }
            }
        }
    }
    Vocabulary::from_tokens(toks)
}

fn self_pairs(p: &[(String, String)]) -> Vec<(String, String)> {
    p.to_vec()
}

// ── Agreement task ───────────────────────────────────────────────────

const AGREEMENT_I: usize = 2;
const AGREEMENT_N: usize = 9;

fn sample_agreement(
    pools: &LexiconPools,
    rng: &mut ChaCha8Rng,
    attr: Attribute,
) -> SentenceInstance {
    let subj = rng.gen_range(0..pools.nouns.len());
    let prep = &pools.prepositions[rng.gen_range(0..pools.prepositions.len())];
    let loc_idx = rng.gen_range(0..pools.location_nouns.len());
    let loc_plural = rng.gen_bool(0.5);
    let loc = if loc_plural {
        &pools.location_nouns[loc_idx].1
    } else {
        &pools.location_nouns[loc_idx].0
    };
    let proper = &pools.proper_nouns[rng.gen_range(0..pools.proper_nouns.len())];
    let adv = &pools.adverbs[rng.gen_range(0..pools.adverbs.len())];
    let verb_idx = rng.gen_range(0..pools.verbs.len());
    let obj_idx = rng.gen_range(0..pools.nouns.len());
    let obj_plural = rng.gen_bool(0.5);
    let obj = if obj_plural {
        &pools.nouns[obj_idx].1
    } else {
        &pools.nouns[obj_idx].0
    };

    let verb = pools.verb_form(verb_idx, attr).to_string();
    let other = pools
        .verb_form(
            verb_idx,
            match attr {
                Attribute::Singular => Attribute::Plural,
                _ => Attribute::Singular,
            },
        )
        .to_string();

    let tokens: Vec<String> = [
        "the",
        pools.noun_form(subj, attr),
        prep,
        "the",
        loc,
        "of",
        proper,
        adv,
        &verb,
        "the",
        obj,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    SentenceInstance {
        tokens,
        i: AGREEMENT_I,
        n: AGREEMENT_N,
        d: verb,
        t: other,
        task: Task::Agreement,
        attribute: attr,
    }
}

/// Generate the agreement corpus: `n_train` + `n_eval` unique sentences,
/// singular/plural balanced within each split, eval disjoint from train.
pub fn generate_agreement_corpus(
    pools: &LexiconPools,
    seed: u64,
    n_train: usize,
    n_eval: usize,
) -> Result<(Vec<SentenceInstance>, Vec<SentenceInstance>)> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::InvalidConfig("corpus sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<String>> = HashSet::new();

    let fill = |count: usize, rng: &mut ChaCha8Rng, seen: &mut HashSet<Vec<String>>| {
        let mut out = Vec::with_capacity(count);
        for idx in 0..count {
            let attr = if idx % 2 == 0 {
                Attribute::Singular
            } else {
                Attribute::Plural
            };
            let mut attempts = 0usize;
            loop {
                let inst = sample_agreement(pools, rng, attr);
                if seen.insert(inst.tokens.clone()) {
                    out.push(inst);
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::PoolExhausted(format!(
                        "cannot draw {count} unique agreement sentences"
                    )));
                }
            }
        }
        Ok(out)
    };

    let train = fill(n_train, &mut rng, &mut seen)?;
    let eval = fill(n_eval, &mut rng, &mut seen)?;
    Ok((train, eval))
}

/// Check an agreement sentence against the lexicon alone: template shape,
/// and the verb form at `n` agreeing with the subject form at `i`.
pub fn validate_agreement_sentence(pools: &LexiconPools, inst: &SentenceInstance) -> bool {
    if inst.task != Task::Agreement
        || inst.tokens.len() != 11
        || inst.i != AGREEMENT_I
        || inst.n != AGREEMENT_N
    {
        return false;
    }
    let subj = &inst.tokens[inst.intervention_index()];
    let verb = &inst.tokens[inst.target_index()];
    let subj_singular = pools.nouns.iter().any(|(sg, _)| sg == subj);
    let subj_plural = pools.nouns.iter().any(|(_, pl)| pl == subj);
    let verb_singular = pools.verbs.iter().any(|(sg, _)| sg == verb);
    let verb_plural = pools.verbs.iter().any(|(_, pl)| pl == verb);
    let structure_ok = inst.tokens[0] == "the"
        && inst.tokens[3] == "the"
        && inst.tokens[5] == "of"
        && inst.tokens[9] == "the"
        && pools.prepositions.contains(&inst.tokens[2])
        && pools
            .location_nouns
            .iter()
            .any(|(sg, pl)| *sg == inst.tokens[4] || *pl == inst.tokens[4])
        && pools.proper_nouns.contains(&inst.tokens[6])
        && pools.adverbs.contains(&inst.tokens[7])
        && pools
            .nouns
            .iter()
            .any(|(sg, pl)| *sg == inst.tokens[10] || *pl == inst.tokens[10]);
    structure_ok
        && ((subj_singular && verb_singular && inst.attribute == Attribute::Singular)
            || (subj_plural && verb_plural && inst.attribute == Attribute::Plural))
        && inst.tokens[inst.target_index()] == inst.d
}

/// The minimal-pair counterpart: flip the subject number and re-inflect the
/// subject and verb. Involutive: applying it twice returns the original.
pub fn agreement_counterpart(
    pools: &LexiconPools,
    inst: &SentenceInstance,
) -> Result<SentenceInstance> {
    if inst.task != Task::Agreement {
        return Err(Error::InvalidConfig(
            "counterpart is defined for agreement instances".into(),
        ));
    }
    let flipped = match inst.attribute {
        Attribute::Singular => Attribute::Plural,
        Attribute::Plural => Attribute::Singular,
        _ => {
            return Err(Error::InvalidConfig(
                "agreement instance with non-number attribute".into(),
            ))
        }
    };
    let subj = &inst.tokens[inst.intervention_index()];
    let subj_idx = pools
        .nouns
        .iter()
        .position(|(sg, pl)| sg == subj || pl == subj)
        .ok_or_else(|| Error::UnknownToken(subj.clone()))?;
    let mut tokens = inst.tokens.clone();
    tokens[inst.intervention_index()] = pools.noun_form(subj_idx, flipped).to_string();
    tokens[inst.target_index()] = inst.t.clone();
    Ok(SentenceInstance {
        tokens,
        i: inst.i,
        n: inst.n,
        d: inst.t.clone(),
        t: inst.d.clone(),
        task: Task::Agreement,
        attribute: flipped,
    })
}

// ── Gender task ──────────────────────────────────────────────────────

struct ParsedTemplate {
    /// Tokens with the occupation slot blank at `occ_pos`.
    words: Vec<String>,
    occ_pos: usize,
    pron_pos: usize,
}

fn parse_template(template: &str) -> Result<ParsedTemplate> {
    let words: Vec<String> = template.split_whitespace().map(String::from).collect();
    let occ_pos = words
        .iter()
        .position(|w| w == "{occ}")
        .ok_or_else(|| Error::InvalidConfig(format!("template without {{occ}} slot: `{template}`")))?;
    let pron_pos = words.iter().position(|w| w == "{pron}").ok_or_else(|| {
        Error::InvalidConfig(format!("template without pronoun slot: `{template}`"))
    })?;
    if pron_pos != words.len() - 1 || pron_pos <= occ_pos {
        return Err(Error::InvalidConfig(format!(
            "pronoun slot must terminate the template: `{template}`"
        )));
    }
    Ok(ParsedTemplate {
        words,
        occ_pos,
        pron_pos,
    })
}

/// Generate the gender corpus: every (template, profession) combination
/// exactly once, shuffled by seed, then split eval-first.
///
/// Each profession is deterministically associated with one pronoun (half
/// the professions with each), and every sentence of that profession fills
/// its pronoun slot accordingly; the pronoun is recorded as the attribute.
/// A model trained on the corpus therefore acquires a profession-conditional
/// pronoun preference, which is the bias the intervention is asked to flip.
pub fn generate_gender_corpus(
    pools: &LexiconPools,
    seed: u64,
    n_train: usize,
    n_eval: usize,
) -> Result<(Vec<SentenceInstance>, Vec<SentenceInstance>)> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::InvalidConfig("corpus sizes must be positive".into()));
    }
    let templates: Vec<ParsedTemplate> = pools
        .gender_templates
        .iter()
        .map(|t| parse_template(t))
        .collect::<Result<_>>()?;
    let total = templates.len() * pools.occupations.len();
    if n_train + n_eval > total {
        return Err(Error::PoolExhausted(format!(
            "requested {} instances but templates x professions = {total}",
            n_train + n_eval
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Half the professions take "he", half "she", fixed for the corpus.
    let mut profession_order: Vec<usize> = (0..pools.occupations.len()).collect();
    for idx in (1..profession_order.len()).rev() {
        let j = rng.gen_range(0..=idx);
        profession_order.swap(idx, j);
    }
    let mut pronoun_of = vec![Attribute::She; pools.occupations.len()];
    for &o in profession_order.iter().take(pools.occupations.len() / 2) {
        pronoun_of[o] = Attribute::He;
    }

    let mut combos: Vec<(usize, usize)> = (0..templates.len())
        .flat_map(|t| (0..pools.occupations.len()).map(move |o| (t, o)))
        .collect();
    for idx in (1..combos.len()).rev() {
        let j = rng.gen_range(0..=idx);
        combos.swap(idx, j);
    }

    let build = |(t, o): (usize, usize)| -> SentenceInstance {
        let tpl = &templates[t];
        let attr = pronoun_of[o];
        let (pron, other) = match attr {
            Attribute::He => ("he", "she"),
            _ => ("she", "he"),
        };
        let mut tokens = tpl.words.clone();
        tokens[tpl.occ_pos] = pools.occupations[o].clone();
        tokens[tpl.pron_pos] = pron.to_string();
        SentenceInstance {
            tokens,
            i: tpl.occ_pos + 1,
            n: tpl.pron_pos + 1,
            d: pron.to_string(),
            t: other.to_string(),
            task: Task::Gender,
            attribute: attr,
        }
    };

    let eval: Vec<SentenceInstance> = combos[..n_eval].iter().map(|&c| build(c)).collect();
    let train: Vec<SentenceInstance> = combos[n_eval..n_eval + n_train]
        .iter()
        .map(|&c| build(c))
        .collect();
    Ok((train, eval))
}

// ── Corpus files ─────────────────────────────────────────────────────

const COLUMNS: [&str; 7] = ["tokens", "i", "n", "d", "t", "task", "attribute"];

/// Write instances as UTF-8 TSV, one per line:
/// `tokens<TAB>i<TAB>n<TAB>d<TAB>t<TAB>task<TAB>attribute`,
/// tokens space-joined. Atomic (temp file + rename).
pub fn write_corpus(path: &Path, instances: &[SentenceInstance]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for inst in instances {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                inst.tokens.join(" "),
                inst.i,
                inst.n,
                inst.d,
                inst.t,
                inst.task,
                inst.attribute
            )?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a corpus file back. An empty file is an empty corpus; a malformed
/// line is an error naming the line and the missing or bad column.
pub fn read_corpus(path: &Path) -> Result<Vec<SentenceInstance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != COLUMNS.len() {
            let missing = COLUMNS.get(fields.len()).copied().unwrap_or("extra");
            return Err(Error::Parse {
                line: line_no + 1,
                msg: format!(
                    "expected {} tab-separated columns, got {} (missing `{missing}`)",
                    COLUMNS.len(),
                    fields.len()
                ),
            });
        }
        let parse_pos = |s: &str, col: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no + 1,
                msg: format!("bad `{col}` value `{s}`"),
            })
        };
        let inst = SentenceInstance {
            tokens: fields[0].split(' ').map(String::from).collect(),
            i: parse_pos(fields[1], "i")?,
            n: parse_pos(fields[2], "n")?,
            d: fields[3].to_string(),
            t: fields[4].to_string(),
            task: fields[5].parse().map_err(|e| Error::Parse {
                line: line_no + 1,
                msg: format!("{e}"),
            })?,
            attribute: fields[6].parse().map_err(|e| Error::Parse {
                line: line_no + 1,
                msg: format!("{e}"),
            })?,
        };
        inst.validate().map_err(|e| Error::Parse {
            line: line_no + 1,
            msg: format!("{e}"),
        })?;
        out.push(inst);
    }
    Ok(out)
}
