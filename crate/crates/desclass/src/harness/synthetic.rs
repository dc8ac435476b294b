//! Synthetic entangled-aspect review generator. Every review carries one
//! signal phrase per aspect with independently drawn sentiments, buried in
//! filler, so the label signal for any one aspect is entangled with the
//! others'. The generator doubles as its own labeling oracle: sentiments
//! are recoverable by phrase lookup alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::text::{Example, LabelSpace, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("aspect '{0}' is missing phrases for sentiment '{1}'")]
    MissingPhrases(String, String),
    #[error("(aspect '{0}', sentiment '{1}') has {2} phrases, need >= 3")]
    TooFewPhrases(String, String, usize),
    #[error("signal phrases of aspects '{0}' and '{1}' share token '{2}'")]
    OverlappingAspects(String, String, String),
    #[error("need at least 2 aspects for entanglement, got {0}")]
    TooFewAspects(usize),
    #[error("filler vocabulary must not contain signal token '{0}'")]
    FillerCollision(String),
    #[error("review length range {0}..{1} is empty")]
    BadLengthRange(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Generator description: aspects, per-(aspect, sentiment) signal phrases,
/// filler vocabulary, review shape, sizes, and the seed.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub aspects: Vec<String>,
    pub sentiments: Vec<String>,
    /// aspect -> sentiment -> phrases (each phrase is a token string).
    pub signal_phrases: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub filler_vocab: Vec<String>,
    /// Filler tokens per review, inclusive range.
    pub filler_len: (usize, usize),
    /// Within-cell phrase weights (first phrase most common); padded or
    /// truncated to the phrase count and renormalized.
    pub phrase_weights: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.aspects.len() < 2 {
            return Err(SyntheticError::TooFewAspects(self.aspects.len()));
        }
        if self.filler_len.0 > self.filler_len.1 || self.filler_len.1 == 0 {
            return Err(SyntheticError::BadLengthRange(self.filler_len.0, self.filler_len.1));
        }
        let mut aspect_tokens: Vec<(String, BTreeSet<String>)> = Vec::new();
        for aspect in &self.aspects {
            let mut tokens = BTreeSet::new();
            let per_sent = self
                .signal_phrases
                .get(aspect)
                .ok_or_else(|| SyntheticError::MissingPhrases(aspect.clone(), "*".into()))?;
            for sentiment in &self.sentiments {
                let phrases = per_sent.get(sentiment).ok_or_else(|| {
                    SyntheticError::MissingPhrases(aspect.clone(), sentiment.clone())
                })?;
                if phrases.len() < 3 {
                    return Err(SyntheticError::TooFewPhrases(
                        aspect.clone(),
                        sentiment.clone(),
                        phrases.len(),
                    ));
                }
                for phrase in phrases {
                    for tok in phrase.split_whitespace() {
                        tokens.insert(tok.to_lowercase());
                    }
                }
            }
            aspect_tokens.push((aspect.clone(), tokens));
        }
        for i in 0..aspect_tokens.len() {
            for j in i + 1..aspect_tokens.len() {
                if let Some(shared) = aspect_tokens[i].1.intersection(&aspect_tokens[j].1).next() {
                    return Err(SyntheticError::OverlappingAspects(
                        aspect_tokens[i].0.clone(),
                        aspect_tokens[j].0.clone(),
                        shared.clone(),
                    ));
                }
            }
        }
        let signal_all: BTreeSet<&String> = aspect_tokens.iter().flat_map(|(_, t)| t).collect();
        for filler in &self.filler_vocab {
            if signal_all.contains(filler) {
                return Err(SyntheticError::FillerCollision(filler.clone()));
            }
        }
        // full phrases must be unique across sentiments of one aspect or
        // the lookup oracle becomes ambiguous
        for aspect in &self.aspects {
            let mut seen: BTreeSet<String> = BTreeSet::new();
            for sentiment in &self.sentiments {
                for phrase in &self.signal_phrases[aspect][sentiment] {
                    if !seen.insert(phrase.to_lowercase()) {
                        return Err(SyntheticError::OverlappingAspects(
                            aspect.clone(),
                            aspect.clone(),
                            phrase.clone(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SyntheticError> {
        let f = std::fs::File::open(path)?;
        let spec: SyntheticSpec = serde_json::from_reader(std::io::BufReader::new(f))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), SyntheticError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// Hotel-review flavored default: two aspects (rooms, staff), three
    /// sentiments, ten two-token phrases per cell under a steep usage
    /// distribution (the tail words are rare in training, so the wordlist
    /// carried by a class description is knowledge the training set alone
    /// rations out slowly), and a ~160-word filler vocabulary.
    pub fn hotel_default() -> Self {
        let mut signal_phrases = BTreeMap::new();
        let cell = |adjs: &str, noun: &str| -> Vec<String> {
            adjs.split_whitespace().map(|a| format!("{a} {noun}")).collect()
        };
        let rooms: BTreeMap<String, Vec<String>> = [
            ("positive", cell("immaculate spotless luxurious airy elegant cozy renovated stylish gleaming pristine", "rooms")),
            ("negative", cell("filthy cramped moldy dingy shabby drafty rundown stained musty peeling", "rooms")),
            ("neutral", cell("ordinary plain standard unremarkable average typical modest functional dated bland", "rooms")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let staff: BTreeMap<String, Vec<String>> = [
            ("positive", cell("gracious attentive welcoming courteous helpful cheerful friendly thoughtful personable obliging", "staff")),
            ("negative", cell("rude dismissive hostile surly abrasive unhelpful impatient curt snippy scornful", "staff")),
            ("neutral", cell("formal reserved detached businesslike distant impersonal measured unhurried procedural restrained", "staff")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        signal_phrases.insert("rooms".to_string(), rooms);
        signal_phrases.insert("staff".to_string(), staff);

        let filler: Vec<String> = "the a an and but so very quite rather really then while also \
            night day week stay visit trip checkin checkout lobby hallway elevator corridor \
            breakfast dinner coffee tea juice menu buffet parking garden pool gym spa sauna \
            street view window door bed pillow blanket lamp desk chair sofa towel shower sink \
            mirror carpet ceiling wall floor noise music air light heat cold water wifi signal \
            remote tv channel phone key card price rate bill receipt tax fee booking website \
            review friend family couple kids group tour guide map city center station airport \
            taxi bus train walk minutes hours morning evening afternoon weekend summer winter \
            arrived left stayed booked paid asked told found felt seemed looked sounded went \
            came said think thought maybe perhaps honestly overall somewhat mostly nearly almost \
            definitely certainly probably barely just still yet again once twice around nearby \
            upstairs downstairs inside outside everywhere somewhere anyway besides though"
            .split_whitespace()
            .map(String::from)
            .collect();

        SyntheticSpec {
            aspects: vec!["rooms".into(), "staff".into()],
            sentiments: vec!["positive".into(), "negative".into(), "neutral".into()],
            signal_phrases,
            filler_vocab: filler,
            filler_len: (16, 28),
            phrase_weights: zipf_weights(10, 1.8),
            train_size: 5000,
            test_size: 1000,
            seed: 2024,
        }
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace::new(self.sentiments.clone(), TaskKind::SingleLabel)
            .expect("sentiments form a valid label space")
    }

    /// Template registries for every variant, one per aspect, derived from
    /// the phrase banks. The wiki-style entry names the cell's signal
    /// words; the keyword entry is the bare "aspect sentiment" pair; the
    /// expansion sits in between.
    pub fn registries_for(&self, aspect: &str) -> RegistryFiles {
        let per_sent = &self.signal_phrases[aspect];
        let mut wiki = BTreeMap::new();
        let mut keyword = BTreeMap::new();
        let mut expansion = BTreeMap::new();
        for sentiment in &self.sentiments {
            let words = distinct_leading_words(&per_sent[sentiment]);
            wiki.insert(
                sentiment.clone(),
                format!("{sentiment} {aspect} are described as {} or {}",
                    words[..words.len() - 1].join(" "),
                    words[words.len() - 1]),
            );
            keyword.insert(sentiment.clone(), format!("{aspect} {sentiment}"));
            let mut exp = vec![aspect.to_string(), sentiment.clone()];
            exp.extend(words.iter().cloned());
            expansion.insert(sentiment.clone(), exp);
        }
        RegistryFiles { wiki, keyword, expansion }
    }
}

/// Per-variant registry contents ready to serialize.
#[derive(Clone, Debug)]
pub struct RegistryFiles {
    pub wiki: BTreeMap<String, String>,
    pub keyword: BTreeMap<String, String>,
    pub expansion: BTreeMap<String, Vec<String>>,
}

/// Normalized weights proportional to rank^-exponent.
pub fn zipf_weights(k: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=k).map(|i| (i as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn distinct_leading_words(phrases: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for p in phrases {
        let w = p.split_whitespace().next().unwrap_or("").to_lowercase();
        if !w.is_empty() && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// One aspect's train/test splits (labels are that aspect's sentiments).
#[derive(Debug)]
pub struct AspectDataset {
    pub aspect: String,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug)]
pub struct SyntheticData {
    pub label_space: LabelSpace,
    pub per_aspect: Vec<AspectDataset>,
}

struct ReviewPlan {
    /// sentiment index and phrase per aspect, in spec aspect order.
    sentiments: Vec<usize>,
    phrases: Vec<String>,
}

/// Generate the corpus. Train and test share phrase banks but draw filler
/// and placement from split-specific seeds.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, SyntheticError> {
    spec.validate()?;
    let label_space = spec.label_space();
    let train_plans = plan_reviews(spec, spec.train_size, spec.seed ^ 0x7261_696e);
    let test_plans = plan_reviews(spec, spec.test_size, spec.seed ^ 0x7465_7374);
    let train_texts = render_reviews(spec, &train_plans, spec.seed ^ 0x66_696c);
    let test_texts = render_reviews(spec, &test_plans, spec.seed ^ 0x66_7465);

    let mut per_aspect = Vec::new();
    for (a_idx, aspect) in spec.aspects.iter().enumerate() {
        let make = |plans: &[ReviewPlan], texts: &[String], tag: &str| -> Vec<Example> {
            plans
                .iter()
                .zip(texts)
                .enumerate()
                .map(|(i, (plan, text))| Example {
                    id: format!("{tag}{i}"),
                    text: text.clone(),
                    tokens: Vec::new(),
                    labels: std::iter::once(plan.sentiments[a_idx]).collect(),
                })
                .collect()
        };
        per_aspect.push(AspectDataset {
            aspect: aspect.clone(),
            train: make(&train_plans, &train_texts, "tr"),
            test: make(&test_plans, &test_texts, "te"),
        });
    }
    Ok(SyntheticData { label_space, per_aspect })
}

fn plan_reviews(spec: &SyntheticSpec, count: usize, seed: u64) -> Vec<ReviewPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.sentiments.len();
    (0..count)
        .map(|_| {
            let mut sentiments = Vec::with_capacity(spec.aspects.len());
            let mut phrases = Vec::with_capacity(spec.aspects.len());
            for aspect in &spec.aspects {
                let s = rng.gen_range(0..k);
                sentiments.push(s);
                let bank = &spec.signal_phrases[aspect][&spec.sentiments[s]];
                phrases.push(pick_weighted(bank, &spec.phrase_weights, &mut rng));
            }
            ReviewPlan { sentiments, phrases }
        })
        .collect()
}

fn pick_weighted(bank: &[String], weights: &[f64], rng: &mut ChaCha8Rng) -> String {
    let w: Vec<f64> = (0..bank.len())
        .map(|i| weights.get(i).copied().unwrap_or(0.05))
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        u -= wi;
        if u <= 0.0 {
            return bank[i].clone();
        }
    }
    bank[bank.len() - 1].clone()
}

fn render_reviews(spec: &SyntheticSpec, plans: &[ReviewPlan], seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plans
        .iter()
        .map(|plan| {
            let filler_count = rng.gen_range(spec.filler_len.0..=spec.filler_len.1);
            let mut words: Vec<String> = (0..filler_count)
                .map(|_| spec.filler_vocab[rng.gen_range(0..spec.filler_vocab.len())].clone())
                .collect();
            // pick slots in filler coordinates up front and insert from the
            // back, so no phrase can land inside another
            let mut placements: Vec<(usize, usize)> = (0..plan.phrases.len())
                .map(|a| (rng.gen_range(0..=filler_count), a))
                .collect();
            placements.shuffle(&mut rng);
            placements.sort_by(|x, y| y.0.cmp(&x.0));
            for &(pos, a) in &placements {
                let mut rest = words.split_off(pos);
                words.extend(plan.phrases[a].split_whitespace().map(String::from));
                words.append(&mut rest);
            }
            words.join(" ")
        })
        .collect()
}

/// Recover the per-aspect sentiment of a review by phrase lookup; the
/// generator's own labels must agree exactly.
pub fn oracle_label(spec: &SyntheticSpec, text: &str, aspect: &str) -> Option<usize> {
    let padded = format!(" {} ", text.to_lowercase());
    let mut found = None;
    for (s_idx, sentiment) in spec.sentiments.iter().enumerate() {
        for phrase in &spec.signal_phrases[aspect][sentiment] {
            if padded.contains(&format!(" {} ", phrase.to_lowercase())) {
                if found.is_some() {
                    return None; // ambiguous: two phrases of one aspect
                }
                found = Some(s_idx);
            }
        }
    }
    found
}

/// Largest |P(sa, sb) - P(sa)P(sb)| over sentiment pairs of two aspects;
/// independence of the draws keeps it near zero.
pub fn aspect_correlation(data: &SyntheticData, spec: &SyntheticSpec) -> f64 {
    let k = spec.sentiments.len();
    let a0 = &data.per_aspect[0].train;
    let a1 = &data.per_aspect[1].train;
    let n = a0.len() as f64;
    let mut joint = vec![vec![0.0; k]; k];
    let mut m0 = vec![0.0; k];
    let mut m1 = vec![0.0; k];
    for (e0, e1) in a0.iter().zip(a1) {
        let s0 = *e0.labels.iter().next().unwrap();
        let s1 = *e1.labels.iter().next().unwrap();
        joint[s0][s1] += 1.0;
        m0[s0] += 1.0;
        m1[s1] += 1.0;
    }
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let dev = (joint[i][j] / n - (m0[i] / n) * (m1[j] / n)).abs();
            worst = worst.max(dev);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_validates() {
        SyntheticSpec::hotel_default().validate().unwrap();
    }

    #[test]
    fn every_review_carries_one_phrase_per_aspect() {
        let mut spec = SyntheticSpec::hotel_default();
        spec.train_size = 300;
        spec.test_size = 50;
        let data = gen_synthetic(&spec).unwrap();
        for ds in &data.per_aspect {
            for ex in ds.train.iter().chain(&ds.test) {
                let found = oracle_label(&spec, &ex.text, &ds.aspect);
                assert!(found.is_some(), "no unambiguous phrase in: {}", ex.text);
            }
        }
    }

    #[test]
    fn oracle_agrees_with_generator_labels() {
        let mut spec = SyntheticSpec::hotel_default();
        spec.train_size = 500;
        spec.test_size = 100;
        let data = gen_synthetic(&spec).unwrap();
        for ds in &data.per_aspect {
            for ex in ds.train.iter().chain(&ds.test) {
                let oracle = oracle_label(&spec, &ex.text, &ds.aspect).unwrap();
                let gold = *ex.labels.iter().next().unwrap();
                assert_eq!(oracle, gold, "oracle disagrees on {}", ex.id);
            }
        }
    }

    #[test]
    fn aspect_sentiments_are_uncorrelated() {
        let mut spec = SyntheticSpec::hotel_default();
        spec.train_size = 4000;
        spec.test_size = 10;
        let data = gen_synthetic(&spec).unwrap();
        let corr = aspect_correlation(&data, &spec);
        assert!(corr <= 0.05, "max joint deviation {corr}");
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let mut spec = SyntheticSpec::hotel_default();
        spec.train_size = 50;
        spec.test_size = 10;
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        for (da, db) in a.per_aspect.iter().zip(&b.per_aspect) {
            for (ea, eb) in da.train.iter().zip(&db.train) {
                assert_eq!(ea.text, eb.text);
                assert_eq!(ea.labels, eb.labels);
            }
        }
    }

    #[test]
    fn overlapping_aspect_tokens_are_rejected() {
        let mut spec = SyntheticSpec::hotel_default();
        spec.signal_phrases
            .get_mut("staff")
            .unwrap()
            .get_mut("positive")
            .unwrap()[0] = "immaculate staff".to_string();
        assert!(matches!(
            spec.validate(),
            Err(SyntheticError::OverlappingAspects(_, _, _))
        ));
    }

    #[test]
    fn registries_name_the_signal_words() {
        let spec = SyntheticSpec::hotel_default();
        let regs = spec.registries_for("rooms");
        let wiki_pos = &regs.wiki["positive"];
        for w in ["immaculate", "spotless", "luxurious"] {
            assert!(wiki_pos.contains(w), "{wiki_pos}");
        }
        assert_eq!(regs.keyword["negative"], "rooms negative");
        assert!(regs.expansion["neutral"].contains(&"rooms".to_string()));
    }
}
