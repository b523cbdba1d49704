//! Dialog corpora: JSONL loading, label inventories, co-occurrence sets,
//! empirical marginals, synthetic generation and batching.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BmimError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: String,
    pub tokens: Vec<String>,
    pub sentiment: usize,
    pub act: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// The two label inventories. Ids index into the ordered lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub sentiment_labels: Vec<String>,
    pub act_labels: Vec<String>,
    pub neutral_id: Option<usize>,
}

impl LabelSpace {
    /// Builds a label space; the sentiment label spelled `neutral`
    /// (any case) becomes the neutral id.
    pub fn new(sentiment_labels: Vec<String>, act_labels: Vec<String>) -> Result<Self> {
        for (task, labels) in [("sentiment", &sentiment_labels), ("act", &act_labels)] {
            let unique: BTreeSet<_> = labels.iter().collect();
            if unique.len() != labels.len() {
                return Err(BmimError::Config(format!("duplicate {task} labels")));
            }
        }
        let neutral_id = sentiment_labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case("neutral"));
        Ok(LabelSpace {
            sentiment_labels,
            act_labels,
            neutral_id,
        })
    }

    pub fn num_sentiments(&self) -> usize {
        self.sentiment_labels.len()
    }

    pub fn num_acts(&self) -> usize {
        self.act_labels.len()
    }

    /// Size of the joint inventory (sentiments first, then acts).
    pub fn joint_size(&self) -> usize {
        self.num_sentiments() + self.num_acts()
    }

    pub fn sentiment_id(&self, label: &str) -> Option<usize> {
        self.sentiment_labels.iter().position(|l| l == label)
    }

    pub fn act_id(&self, label: &str) -> Option<usize> {
        self.act_labels.iter().position(|l| l == label)
    }

    /// Joint index of act `a`.
    pub fn joint_act(&self, a: usize) -> usize {
        self.num_sentiments() + a
    }

    /// Name and task of a joint-inventory index.
    pub fn joint_label(&self, i: usize) -> (&str, &'static str) {
        if i < self.num_sentiments() {
            (&self.sentiment_labels[i], "sentiment")
        } else {
            (&self.act_labels[i - self.num_sentiments()], "act")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelSource {
    Infer,
    Fixed(LabelSpace),
}

/// An immutable collection of dialogs sharing one label space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogSet {
    pub label_space: LabelSpace,
    pub dialogs: Vec<Dialog>,
}

impl DialogSet {
    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.dialogs.iter().map(Dialog::len).sum()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.dialogs.iter().flat_map(|d| d.utterances.iter())
    }

    /// Subset by dialog index, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> DialogSet {
        DialogSet {
            label_space: self.label_space.clone(),
            dialogs: indices.iter().map(|&i| self.dialogs[i].clone()).collect(),
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_jsonl()?.as_bytes())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        for d in &self.dialogs {
            let raw = RawDialog {
                dialog_id: d.id.clone(),
                utterances: d
                    .utterances
                    .iter()
                    .map(|u| RawUtterance {
                        speaker: u.speaker.clone(),
                        text: Some(u.tokens.join(" ")),
                        tokens: Some(u.tokens.clone()),
                        sentiment: self.label_space.sentiment_labels[u.sentiment].clone(),
                        act: self.label_space.act_labels[u.act].clone(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &raw)?;
            out.push(b'\n');
        }
        Ok(String::from_utf8(out).expect("json is utf-8"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDialog {
    dialog_id: String,
    utterances: Vec<RawUtterance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawUtterance {
    #[serde(default)]
    speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    sentiment: String,
    act: String,
}

/// Lowercases and splits on whitespace; used when a record has no `tokens`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(String::from).collect()
}

/// Reads one dialog per line. Blank lines are skipped.
pub fn load_dialogs(path: impl AsRef<Path>, labels: &LabelSource) -> Result<DialogSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| BmimError::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| BmimError::io(path, e))?;
        lines.push((i + 1, line));
    }
    parse_lines(path, lines, labels)
}

/// Parses JSONL text held in memory.
pub fn parse_dialogs(text: &str, labels: &LabelSource) -> Result<DialogSet> {
    let lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect();
    parse_lines(Path::new("<memory>"), lines, labels)
}

fn parse_lines(
    path: &Path,
    lines: Vec<(usize, String)>,
    labels: &LabelSource,
) -> Result<DialogSet> {
    let mut raws = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialog = serde_json::from_str(&line).map_err(|e| BmimError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.utterances.is_empty() {
            return Err(BmimError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("dialog {} has no utterances", raw.dialog_id),
            });
        }
        raws.push((line_no, raw));
    }

    let label_space = match labels {
        LabelSource::Fixed(ls) => ls.clone(),
        LabelSource::Infer => {
            let mut sents = BTreeSet::new();
            let mut acts = BTreeSet::new();
            for (_, raw) in &raws {
                for u in &raw.utterances {
                    sents.insert(u.sentiment.clone());
                    acts.insert(u.act.clone());
                }
            }
            LabelSpace::new(sents.into_iter().collect(), acts.into_iter().collect())?
        }
    };

    let mut dialogs = Vec::with_capacity(raws.len());
    for (line_no, raw) in raws {
        let mut utterances = Vec::with_capacity(raw.utterances.len());
        for (k, u) in raw.utterances.into_iter().enumerate() {
            let tokens = match (u.tokens, u.text) {
                (Some(t), _) => t,
                (None, Some(text)) => tokenize(&text),
                (None, None) => Vec::new(),
            };
            if tokens.is_empty() {
                return Err(BmimError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("utterance {k} of dialog {} has no tokens", raw.dialog_id),
                });
            }
            let sentiment = label_space.sentiment_id(&u.sentiment).ok_or_else(|| {
                BmimError::Data(format!(
                    "line {line_no}: unknown sentiment label {:?}",
                    u.sentiment
                ))
            })?;
            let act = label_space.act_id(&u.act).ok_or_else(|| {
                BmimError::Data(format!("line {line_no}: unknown act label {:?}", u.act))
            })?;
            utterances.push(Utterance {
                speaker: u.speaker,
                tokens,
                sentiment,
                act,
            });
        }
        dialogs.push(Dialog {
            id: raw.dialog_id,
            utterances,
        });
    }
    Ok(DialogSet {
        label_space,
        dialogs,
    })
}

/// Token inventory built from a training split. Index 0 is the shared
/// unknown-token slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl Vocab {
    pub fn build(train: &DialogSet) -> Self {
        let mut seen = BTreeSet::new();
        for u in train.utterances() {
            for t in &u.tokens {
                seen.insert(t.as_str());
            }
        }
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(seen.into_iter().filter(|t| *t != UNK).map(String::from));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Positive and negative label sets over the joint inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CooccurrenceSets {
    pub positives: Vec<BTreeSet<usize>>,
    pub negatives: Vec<BTreeSet<usize>>,
}

impl CooccurrenceSets {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

/// Two labels co-occur when they annotate the same utterance. Everything
/// else, including labels never seen in training, is a negative.
pub fn cooccurrence_sets(train: &DialogSet, label_space: &LabelSpace) -> CooccurrenceSets {
    let l = label_space.joint_size();
    let mut positives = vec![BTreeSet::new(); l];
    for u in train.utterances() {
        let s = u.sentiment;
        let a = label_space.joint_act(u.act);
        positives[s].insert(a);
        positives[a].insert(s);
    }
    let negatives = (0..l)
        .map(|i| (0..l).filter(|&j| j != i && !positives[i].contains(&j)).collect())
        .collect();
    CooccurrenceSets {
        positives,
        negatives,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub sentiment: Vec<f64>,
    pub act: Vec<f64>,
}

/// Relative frequencies of the gold labels.
pub fn empirical_marginals(train: &DialogSet) -> Marginals {
    let ls = &train.label_space;
    let mut sentiment = vec![0.0; ls.num_sentiments()];
    let mut act = vec![0.0; ls.num_acts()];
    let mut n = 0.0;
    for u in train.utterances() {
        sentiment[u.sentiment] += 1.0;
        act[u.act] += 1.0;
        n += 1.0;
    }
    if n > 0.0 {
        sentiment.iter_mut().for_each(|v| *v /= n);
        act.iter_mut().for_each(|v| *v /= n);
    }
    Marginals { sentiment, act }
}

/// Recipe for a corpus with a known sentiment/act dependency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_dialogs: usize,
    /// Inclusive utterance-count range per dialog.
    pub len_range: (usize, usize),
    /// Number of distinct filler tokens.
    pub vocab_size: usize,
    /// Inclusive filler-token count per utterance.
    pub filler_range: (usize, usize),
    /// P(a) over acts.
    pub act_table: Vec<f64>,
    /// P(s | a), one row per act.
    pub sent_table: Vec<Vec<f64>>,
    /// Probability that an utterance carries its cue tokens.
    pub cue_strength: f64,
    /// Emit sentiment cue tokens in addition to act cues.
    pub sentiment_cues: bool,
    pub sentiment_names: Vec<String>,
    pub act_names: Vec<String>,
}

impl SyntheticSpec {
    /// Three sentiments, five acts, deterministic P(s|a), cues always present.
    pub fn high_signal(n_dialogs: usize) -> Self {
        let one_hot = |k: usize| {
            let mut r = vec![0.0; 3];
            r[k] = 1.0;
            r
        };
        SyntheticSpec {
            n_dialogs,
            len_range: (4, 8),
            vocab_size: 40,
            filler_range: (2, 5),
            act_table: vec![0.2; 5],
            sent_table: vec![one_hot(0), one_hot(0), one_hot(1), one_hot(2), one_hot(2)],
            cue_strength: 1.0,
            sentiment_cues: true,
            sentiment_names: vec!["positive".into(), "neutral".into(), "negative".into()],
            act_names: vec![
                "statement".into(),
                "question".into(),
                "answer".into(),
                "thanking".into(),
                "agreement".into(),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BmimError::Config(m));
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return bad(format!("cue_strength {} outside [0, 1]", self.cue_strength));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return bad(format!("invalid len_range {:?}", self.len_range));
        }
        if self.filler_range.0 > self.filler_range.1 {
            return bad(format!("invalid filler_range {:?}", self.filler_range));
        }
        if self.filler_range.0 == 0 && self.cue_strength < 1.0 {
            return bad("filler_range must start at 1 unless cues are certain".into());
        }
        if self.vocab_size == 0 && self.filler_range.1 > 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.act_names.len() != self.act_table.len() {
            return bad("act_names and act_table differ in length".into());
        }
        if self.sent_table.len() != self.act_table.len() {
            return bad("sent_table needs one row per act".into());
        }
        check_distribution("act_table", &self.act_table)?;
        for (i, row) in self.sent_table.iter().enumerate() {
            if row.len() != self.sentiment_names.len() {
                return bad(format!("sent_table row {i} has wrong width"));
            }
            check_distribution(&format!("sent_table row {i}"), row)?;
        }
        LabelSpace::new(self.sentiment_names.clone(), self.act_names.clone())?;
        Ok(())
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(BmimError::Config(format!("{name} is not a probability vector")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(BmimError::Config(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

pub fn act_cue(name: &str) -> String {
    format!("act_{name}")
}

pub fn sentiment_cue(name: &str) -> String {
    format!("sent_{name}")
}

/// Deterministic corpus generator.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DialogSet> {
    spec.validate()?;
    let label_space = LabelSpace::new(spec.sentiment_names.clone(), spec.act_names.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act_dist = WeightedIndex::new(&spec.act_table)
        .map_err(|e| BmimError::Config(format!("act_table: {e}")))?;
    let sent_dists = spec
        .sent_table
        .iter()
        .map(WeightedIndex::new)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| BmimError::Config(format!("sent_table: {e}")))?;

    let mut dialogs = Vec::with_capacity(spec.n_dialogs);
    for d in 0..spec.n_dialogs {
        let n = rng.gen_range(spec.len_range.0..=spec.len_range.1);
        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            let act = act_dist.sample(&mut rng);
            let sentiment = sent_dists[act].sample(&mut rng);
            let fillers = rng.gen_range(spec.filler_range.0..=spec.filler_range.1);
            let mut tokens: Vec<String> = (0..fillers)
                .map(|_| format!("w{}", rng.gen_range(0..spec.vocab_size)))
                .collect();
            if rng.gen_bool(spec.cue_strength) {
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, act_cue(&spec.act_names[act]));
            }
            if spec.sentiment_cues && rng.gen_bool(spec.cue_strength) {
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, sentiment_cue(&spec.sentiment_names[sentiment]));
            }
            if tokens.is_empty() {
                tokens.push(format!("w{}", rng.gen_range(0..spec.vocab_size.max(1))));
            }
            utterances.push(Utterance {
                speaker: if i % 2 == 0 { "A" } else { "B" }.to_string(),
                tokens,
                sentiment,
                act,
            });
        }
        dialogs.push(Dialog {
            id: format!("syn{d:05}"),
            utterances,
        });
    }
    Ok(DialogSet {
        label_space,
        dialogs,
    })
}

/// Indices of the dialogs in one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Splits dialogs into consecutive batches, optionally after a seeded shuffle.
pub fn batch_dialogs(ds: &DialogSet, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|c| Batch {
            indices: c.to_vec(),
        })
        .collect()
}

/// Writes a JSONL corpus produced elsewhere (e.g. by the generator).
pub fn write_jsonl(ds: &DialogSet, mut w: impl Write) -> Result<()> {
    w.write_all(ds.to_jsonl()?.as_bytes())
        .map_err(|e| BmimError::io("<writer>", e))
}
