//! Mini-batch training, checkpoints and the finite-difference gradient check.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{OptimConfig, TrainConfig};
use crate::corpus::{batch_dialogs, cooccurrence_sets, empirical_marginals, DialogSet, LabelSpace, Vocab};
use crate::error::{BmimError, Result};
use crate::evaluation::{check_label_space, evaluate, EvalOptions};
use crate::heads::LossBreakdown;
use crate::model::{EncodedDialog, LossContext, LossProbe, Model};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Mat;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "bmim-checkpoint";

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, p)| Mat::zeros(p.rows, p.cols)).collect();
        Adam {
            cfg: cfg.clone(),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let OptimConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m.data[k] / bc1;
                let v_hat = v.data[k] / bc2;
                p.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Dev-set scores after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    pub dsc_f1: f64,
    pub dar_f1: f64,
    pub combined_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss components summed over the epoch's batches.
    pub loss: LossBreakdown,
    pub dev: DevScores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` before any epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub history: History,
}

fn encode_all(model: &Model, ds: &DialogSet) -> Vec<EncodedDialog> {
    ds.dialogs.iter().map(|d| model.encode(d)).collect()
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

/// Trains a fresh model and keeps the parameters with the best dev
/// combined F1. An empty `dev` falls back to scoring on `train`.
pub fn train(cfg: &TrainConfig, train: &DialogSet, dev: &DialogSet) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.num_utterances() == 0 {
        return Err(BmimError::Data("training data is empty".into()));
    }
    let selection = if dev.num_utterances() == 0 { train } else { dev };
    check_label_space(&train.label_space, &selection.label_space)?;

    let vocab = Vocab::build(train);
    let sets = cooccurrence_sets(train, &train.label_space);
    let marginals = empirical_marginals(train);
    let ctx = LossContext::from_config(cfg, &sets, &marginals);
    let mut model = Model::new(cfg.clone(), vocab, train.label_space.clone(), cfg.train.seed)?;
    let encoded = encode_all(&model, train);
    let opts = EvalOptions::protocol(cfg.train.protocol);
    let mut adam = Adam::new(&cfg.optim, &model.params);

    let mut history = History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.train.epochs {
        let mut sum = LossBreakdown::default();
        for batch in batch_dialogs(train, cfg.train.batch_size, Some(epoch_shuffle_seed(cfg.train.seed, epoch))) {
            let dialogs: Vec<EncodedDialog> = batch.indices.iter().map(|&i| encoded[i].clone()).collect();
            let (loss, grads) = model.batch_loss(&dialogs, &ctx, true)?;
            adam.step(&mut model.params, &grads.expect("gradients requested"));
            sum.sentiment += loss.sentiment;
            sum.act += loss.act;
            sum.contrastive = add_opt(sum.contrastive, loss.contrastive);
            sum.dual = add_opt(sum.dual, loss.dual);
            sum.total += loss.total;
        }
        let report = evaluate(&model, selection, &opts)?;
        let dev = DevScores {
            dsc_f1: report.sentiment.f1,
            dar_f1: report.act.f1,
            combined_f1: report.combined_f1(),
        };
        history.epochs.push(EpochRecord { epoch, loss: sum, dev });

        if best.as_ref().map_or(true, |(score, _)| dev.combined_f1 > *score) {
            best = Some((dev.combined_f1, model.params.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            let patience = cfg.train.early_stop_patience;
            if patience > 0 && since_best >= patience && epoch + 1 < cfg.train.epochs {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(Checkpoint { model, history })
}

fn add_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_parameter_name: String,
    pub worst_coordinate: usize,
    /// Analytic and finite-difference derivative at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
    /// Largest `|analytic − numeric|` over coordinates below
    /// [`RESOLVABLE_GRADIENT`], which are excluded from `max_rel_err`.
    pub max_abs_err_small: f64,
    pub small_gradient_coordinates: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub kinks_skipped: usize,
    pub step: f64,
    /// Largest relative error per parameter array, in store order.
    pub per_parameter: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` on at most
/// `max_coords` coordinates per array.
///
/// The difference quotient is formed piece by piece from the additive terms
/// of the probe. Coordinates whose perturbation changes the branch signature
/// (a max-pool winner or an active log floor) straddle a kink where no
/// derivative exists; they are skipped and counted.
pub fn check_gradients<F>(
    params: &mut ParamStore,
    analytic: &Gradients,
    mut loss: F,
    step: f64,
    seed: u64,
    max_coords: usize,
) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore) -> Result<LossProbe>,
{
    if !(step > 0.0) {
        return Err(BmimError::Config("finite-difference step must be positive".into()));
    }
    let base = loss(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_parameter_name: String::new(),
        worst_coordinate: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
        max_abs_err_small: 0.0,
        small_gradient_coordinates: 0,
        kinks_skipped: 0,
        step,
        per_parameter: Vec::new(),
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = analytic.get(id).clone();
        let mut worst = 0.0f64;
        for k in pick_coordinates(&g, max_coords, &mut rng) {
            let orig = params.get(id).data[k];
            params.get_mut(id).data[k] = orig + step;
            let plus = loss(params);
            params.get_mut(id).data[k] = orig - step;
            let minus = loss(params);
            params.get_mut(id).data[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if plus.branches != base.branches || minus.branches != base.branches {
                report.kinks_skipped += 1;
                continue;
            }
            if plus.terms.len() != minus.terms.len() {
                return Err(BmimError::Contract("loss probe changed its term layout".into()));
            }
            let diff: f64 = plus.terms.iter().zip(&minus.terms).map(|(p, m)| p - m).sum();
            let numeric = diff / (2.0 * step);
            report.coordinates_checked += 1;
            if g.data[k].abs() < RESOLVABLE_GRADIENT {
                report.small_gradient_coordinates += 1;
                report.max_abs_err_small = report.max_abs_err_small.max((g.data[k] - numeric).abs());
                continue;
            }
            let err = relative_error(g.data[k], numeric);
            worst = worst.max(err);
            if err > report.max_rel_err || report.worst_parameter_name.is_empty() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst_parameter_name = params.name(id).to_string();
                report.worst_coordinate = k;
                report.worst_analytic = g.data[k];
                report.worst_numeric = numeric;
            }
        }
        report.per_parameter.push((params.name(id).to_string(), worst));
    }
    Ok(report)
}

/// Coordinates whose analytic gradient is smaller than this are checked
/// by absolute rather than relative error: at the default step, rounding in
/// the loss pieces alone moves a central difference by about 1e-12.
pub const RESOLVABLE_GRADIENT: f64 = 1e-6;

/// Up to `max_coords` coordinates: resolvable ones first, the rest of the
/// budget from the small-gradient pool, each pool in random order.
fn pick_coordinates(g: &Mat, max_coords: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.data.len();
    if n <= max_coords {
        return (0..n).collect();
    }
    let (mut big, mut small): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&k| g.data[k].abs() >= RESOLVABLE_GRADIENT);
    big.shuffle(rng);
    small.shuffle(rng);
    let mut out: Vec<usize> = big.into_iter().chain(small).take(max_coords).collect();
    out.sort_unstable();
    out
}

/// Largest batch `gradcheck` accepts.
pub const GRADCHECK_MAX_DIALOGS: usize = 2;
pub const GRADCHECK_MAX_UTTERANCES: usize = 6;

/// The first dialogs of `ds`, trimmed to the size `gradcheck` accepts.
pub fn small_batch(ds: &DialogSet) -> DialogSet {
    let n = ds.len().min(GRADCHECK_MAX_DIALOGS);
    let per_dialog = GRADCHECK_MAX_UTTERANCES / n.max(1);
    let mut out = ds.select(&(0..n).collect::<Vec<_>>());
    for d in &mut out.dialogs {
        d.utterances.truncate(per_dialog);
    }
    out
}

/// Gradient check of the full training loss on a small batch. The vocabulary,
/// label statistics and co-occurrence sets are taken from the batch itself.
pub fn gradcheck(cfg: &TrainConfig, batch: &DialogSet, step: f64, seed: u64) -> Result<GradcheckReport> {
    cfg.validate()?;
    if batch.is_empty() || batch.len() > GRADCHECK_MAX_DIALOGS {
        return Err(BmimError::Contract(format!(
            "gradcheck needs 1..={GRADCHECK_MAX_DIALOGS} dialogs, got {}",
            batch.len()
        )));
    }
    if batch.num_utterances() > GRADCHECK_MAX_UTTERANCES {
        return Err(BmimError::Contract(format!(
            "gradcheck needs at most {GRADCHECK_MAX_UTTERANCES} utterances, got {}",
            batch.num_utterances()
        )));
    }
    let sets = cooccurrence_sets(batch, &batch.label_space);
    let marginals = empirical_marginals(batch);
    let ctx = LossContext::from_config(cfg, &sets, &marginals);
    let mut scratch = Model::new(cfg.clone(), Vocab::build(batch), batch.label_space.clone(), seed)?;
    let encoded = encode_all(&scratch, batch);
    let (_, grads) = scratch.batch_loss(&encoded, &ctx, true)?;
    let grads = grads.expect("gradients requested");

    let mut params = scratch.params.clone();
    check_gradients(
        &mut params,
        &grads,
        |p| {
            scratch.params.clone_from(p);
            scratch.loss_probe(&encoded, &ctx)
        },
        step,
        seed,
        50,
    )
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: Map<String, Value>,
    vocab: Vec<String>,
    labels: LabelSpace,
    arrays: Vec<ArrayEntry>,
}

const DTYPE: &str = "f64le";

fn array_file(name: &str) -> String {
    format!("{name}.bin")
}

/// Writes the checkpoint into a temporary sibling directory and renames it
/// into place. An existing checkpoint at `dir` is replaced; any other
/// non-empty directory is left alone and reported.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let model = &ckpt.model;
    let tmp = crate::io::temp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| BmimError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| BmimError::io(&tmp, e))?;

    let mut arrays = Vec::new();
    for (_, name, m) in model.params.iter() {
        let file = array_file(name);
        let bytes: Vec<u8> = m.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&tmp.join(&file), &bytes)?;
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: [m.rows, m.cols],
            dtype: DTYPE.into(),
            file,
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.to_flat(),
        vocab: model.vocab.tokens().to_vec(),
        labels: model.labels.clone(),
        arrays,
    };
    write_file(&tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_file(&tmp.join("history.json"), serde_json::to_string_pretty(&ckpt.history)?.as_bytes())?;
    write_file(&tmp.join("config.json"), model.config.to_flat_json().as_bytes())?;

    if dir.exists() {
        let is_empty = fs::read_dir(dir).map_err(|e| BmimError::io(dir, e))?.next().is_none();
        if !is_empty && !dir.join("manifest.json").exists() {
            let _ = fs::remove_dir_all(&tmp);
            return Err(BmimError::Checkpoint(format!(
                "{} exists and is not a checkpoint directory",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| BmimError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| BmimError::io(dir, e))
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| BmimError::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| BmimError::io(&manifest_path, e))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| BmimError::Checkpoint(format!("manifest.json is not valid JSON: {e}")))?;
    let version = raw
        .get("version")
        .ok_or_else(|| BmimError::Checkpoint("manifest.json: missing field `version`".into()))?;
    let version = version
        .as_u64()
        .ok_or_else(|| BmimError::Checkpoint("manifest.json: field `version` is not an integer".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(BmimError::Version {
            found: version.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| BmimError::Checkpoint(format!("manifest.json: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(BmimError::Checkpoint(format!(
            "manifest.json: field `format` is {:?}, expected {CHECKPOINT_FORMAT:?}",
            manifest.format
        )));
    }
    let config = TrainConfig::from_flat(&manifest.config)?;
    let mut model = Model::new(config, Vocab::from_tokens(manifest.vocab), manifest.labels, 0)?;

    let mut seen = BTreeSet::new();
    for entry in &manifest.arrays {
        let id = model.params.id(&entry.name).ok_or_else(|| {
            BmimError::Checkpoint(format!("array {:?} does not belong to this model", entry.name))
        })?;
        if entry.dtype != DTYPE {
            return Err(BmimError::Checkpoint(format!(
                "array {:?}: unsupported dtype {:?}",
                entry.name, entry.dtype
            )));
        }
        let target = model.params.get_mut(id);
        if entry.shape != [target.rows, target.cols] {
            return Err(BmimError::Checkpoint(format!(
                "array {:?}: shape {:?} does not match model shape [{}, {}]",
                entry.name, entry.shape, target.rows, target.cols
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| BmimError::io(&path, e))?;
        if bytes.len() != target.data.len() * 8 {
            return Err(BmimError::Checkpoint(format!(
                "array {:?}: expected {} bytes, found {}",
                entry.name,
                target.data.len() * 8,
                bytes.len()
            )));
        }
        for (v, chunk) in target.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        seen.insert(entry.name.clone());
    }
    if let Some((_, missing, _)) = model.params.iter().find(|(_, n, _)| !seen.contains(*n)) {
        return Err(BmimError::Checkpoint(format!("missing array {missing:?}")));
    }

    let history_path = dir.join("history.json");
    let history = if history_path.exists() {
        let text = fs::read_to_string(&history_path).map_err(|e| BmimError::io(&history_path, e))?;
        serde_json::from_str(&text).map_err(|e| BmimError::Checkpoint(format!("history.json: {e}")))?
    } else {
        History::default()
    };
    Ok(Checkpoint { model, history })
}
