//! The composed model: encoder → feature selection → multi-hop inference → heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::bmin::{bmin_forward, AttentionDump, BminParams};
use crate::config::{Arch, TrainConfig};
use crate::corpus::{CooccurrenceSets, Dialog, LabelSpace, Marginals, Vocab};
use crate::encoder::{encode_dialog, EncoderParams};
use crate::error::{BmimError, Result};
use crate::fsn::{fsn_sequence, FsnParams};
use crate::heads::{
    contrastive_loss, cross_entropy, dual_loss_sum, forward_architecture, joint_loss, BundleVars,
    DualDirection, HeadParams, LossBreakdown, PredictionBundle,
};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Mat;

/// A dialog mapped to token ids and gold label ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDialog {
    pub tokens: Vec<Vec<usize>>,
    pub sentiment: Vec<usize>,
    pub act: Vec<usize>,
}

impl EncodedDialog {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelParts {
    pub encoder: EncoderParams,
    pub fsn: Option<FsnParams>,
    pub bmin: Option<BminParams>,
    pub heads: HeadParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub labels: LabelSpace,
    pub params: ParamStore,
    pub parts: ModelParts,
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub u: Var,
    pub x_s: Var,
    pub x_a: Var,
    pub q_s: Var,
    pub q_a: Var,
    pub bundle: BundleVars,
}

/// Training-set statistics and loss weights shared by every batch.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub sets: &'a CooccurrenceSets,
    pub marginals: &'a Marginals,
    pub tau: f64,
    pub eps: f64,
    pub lambda_cl: f64,
    pub lambda_dl: f64,
}

impl<'a> LossContext<'a> {
    pub fn from_config(cfg: &TrainConfig, sets: &'a CooccurrenceSets, marginals: &'a Marginals) -> Self {
        let (lambda_cl, lambda_dl) = cfg.effective_lambdas();
        LossContext {
            sets,
            marginals,
            tau: cfg.loss.tau,
            eps: cfg.loss.epsilon,
            lambda_cl,
            lambda_dl,
        }
    }
}

impl Model {
    /// Fresh parameters drawn from `seed`. Ablated modules get no parameters.
    pub fn new(config: TrainConfig, vocab: Vocab, labels: LabelSpace, seed: u64) -> Result<Self> {
        config.validate()?;
        if labels.num_sentiments() == 0 || labels.num_acts() == 0 {
            return Err(BmimError::Data("label space has an empty task inventory".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let m = &config.model;
        let encoder = EncoderParams::new(&mut params, vocab.len(), m.d_w, m.d, m.init_scale, &mut rng);
        let fsn = (!config.ablation.no_fsn)
            .then(|| FsnParams::new(&mut params, m.d, config.fsn.shared_gate, &mut rng));
        let bmin = (!config.ablation.no_bmin).then(|| {
            BminParams::new(&mut params, m.d, config.bmin.hops, config.bmin.tie_directions, &mut rng)
        });
        let heads = HeadParams::new(
            &mut params,
            config.arch,
            4 * m.d,
            m.d_e,
            labels.num_sentiments(),
            labels.num_acts(),
            &mut rng,
        );
        Ok(Model {
            config,
            vocab,
            labels,
            params,
            parts: ModelParts {
                encoder,
                fsn,
                bmin,
                heads,
            },
        })
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn encode(&self, dialog: &Dialog) -> EncodedDialog {
        EncodedDialog {
            tokens: dialog.utterances.iter().map(|u| self.vocab.encode(&u.tokens)).collect(),
            sentiment: dialog.utterances.iter().map(|u| u.sentiment).collect(),
            act: dialog.utterances.iter().map(|u| u.act).collect(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        dialog: &EncodedDialog,
        dump: Option<&mut AttentionDump>,
    ) -> Result<Forward> {
        let u = encode_dialog(tape, &dialog.tokens, &self.parts.encoder)?;
        let (x_s, x_a) = match &self.parts.fsn {
            Some(p) => fsn_sequence(tape, u, p),
            None => (u, u),
        };
        let (q_s, q_a) = match &self.parts.bmin {
            Some(p) => bmin_forward(tape, x_s, x_a, p, dump),
            None => (
                tape.concat_cols(&[x_s, x_s, x_s, x_s]),
                tape.concat_cols(&[x_a, x_a, x_a, x_a]),
            ),
        };
        let bundle = forward_architecture(tape, self.config.arch, q_s, q_a, &self.parts.heads);
        Ok(Forward {
            u,
            x_s,
            x_a,
            q_s,
            q_a,
            bundle,
        })
    }

    pub fn predict_encoded(&self, dialog: &EncodedDialog) -> Result<PredictionBundle> {
        let mut tape = Tape::new(&self.params);
        let f = self.forward(&mut tape, dialog, None)?;
        Ok(PredictionBundle::from_tape(&tape, &f.bundle))
    }

    pub fn predict(&self, dialog: &Dialog) -> Result<PredictionBundle> {
        self.predict_encoded(&self.encode(dialog))
    }

    /// Predicts an unlabelled dialog given as token lists.
    pub fn predict_tokens(&self, utterances: &[Vec<String>]) -> Result<PredictionBundle> {
        let n = utterances.len();
        self.predict_encoded(&EncodedDialog {
            tokens: utterances.iter().map(|u| self.vocab.encode(u)).collect(),
            sentiment: vec![0; n],
            act: vec![0; n],
        })
    }

    pub fn attention(&self, dialog: &Dialog) -> Result<AttentionDump> {
        let mut dump = AttentionDump::default();
        let mut tape = Tape::new(&self.params);
        self.forward(&mut tape, &self.encode(dialog), Some(&mut dump))?;
        Ok(dump)
    }

    pub fn label_embeddings(&self) -> &Mat {
        self.params.get(self.parts.heads.label_embeddings)
    }

    /// Per-dialog objective `CE_s + CE_a + λ_dl · scale · dual`.
    fn dialog_objective(
        &self,
        tape: &mut Tape,
        d: &EncodedDialog,
        ctx: &LossContext,
        dual_scale: f64,
    ) -> Result<DialogObjective> {
        let f = self.forward(tape, d, None)?;
        let ls = cross_entropy(tape, f.bundle.y_s, &d.sentiment);
        let la = cross_entropy(tape, f.bundle.y_a, &d.act);
        let mut root = tape.add(ls, la);
        let mut dual = None;
        if let (Some(dir), Some((_, aux))) = (DualDirection::for_arch(self.config.arch), f.bundle.aux) {
            let main = match dir {
                DualDirection::SentimentToAct => f.bundle.y_a,
                DualDirection::ActToSentiment => f.bundle.y_s,
            };
            let dl = dual_loss_sum(tape, main, aux, &d.sentiment, &d.act, ctx.marginals, dir)?;
            let weighted = tape.scale(dl, ctx.lambda_dl * dual_scale);
            root = tape.add(root, weighted);
            dual = Some(dl);
        }
        if !tape.scalar(root).is_finite() {
            let at = tape.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(BmimError::NonFinite(at));
        }
        Ok(DialogObjective { root, ls, la, dual })
    }

    /// Loss components of a batch and, optionally, the gradient of the total.
    ///
    /// Cross-entropy terms are summed over utterances, the duality penalty is
    /// averaged over the batch's utterances, and the contrastive term is added
    /// once per batch.
    pub fn batch_loss(
        &self,
        batch: &[EncodedDialog],
        ctx: &LossContext,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Gradients>)> {
        let arch = self.config.arch;
        let dual_scale = dual_scale(batch);

        let per_dialog: Vec<Result<(f64, f64, f64, Option<Gradients>)>> = batch
            .par_iter()
            .map(|d| {
                let mut tape = Tape::new(&self.params);
                let obj = self.dialog_objective(&mut tape, d, ctx, dual_scale)?;
                let dual = obj.dual.map_or(0.0, |v| tape.scalar(v));
                let grads = with_grad.then(|| tape.backward(obj.root));
                Ok((tape.scalar(obj.ls), tape.scalar(obj.la), dual, grads))
            })
            .collect();

        let mut grads = with_grad.then(|| Gradients::zeros_like(&self.params));
        let (mut sum_s, mut sum_a, mut sum_dl) = (0.0, 0.0, 0.0);
        for r in per_dialog {
            let (s, a, dl, g) = r?;
            sum_s += s;
            sum_a += a;
            sum_dl += dl;
            if let (Some(total), Some(g)) = (grads.as_mut(), g) {
                total.accumulate(&g);
            }
        }

        let mut cl = 0.0;
        if arch == Arch::Parallel {
            let mut tape = Tape::new(&self.params);
            let loss = self.contrastive_objective(&mut tape, ctx)?;
            cl = tape.scalar(loss);
            if let Some(total) = grads.as_mut() {
                tape.backward_into(loss, ctx.lambda_cl, total);
            }
        }

        let breakdown = joint_loss(arch, sum_s, sum_a, cl, sum_dl * dual_scale, ctx.lambda_cl, ctx.lambda_dl);
        Ok((breakdown, grads))
    }

    fn contrastive_objective(&self, tape: &mut Tape, ctx: &LossContext) -> Result<Var> {
        let e = tape.param(self.parts.heads.label_embeddings);
        let loss = contrastive_loss(tape, e, ctx.sets, ctx.tau, ctx.eps);
        if !tape.scalar(loss).is_finite() {
            return Err(BmimError::NonFinite("heads.contrastive_loss".into()));
        }
        Ok(loss)
    }

    /// The total batch loss split into additive pieces, with the branch
    /// signature of every tape. Finite-difference checks subtract pieces
    /// pairwise, which keeps rounding at the scale of the pieces rather than
    /// of the total.
    pub fn loss_probe(&self, batch: &[EncodedDialog], ctx: &LossContext) -> Result<LossProbe> {
        let dual_scale = dual_scale(batch);
        let mut probe = LossProbe::default();
        for d in batch {
            let mut tape = Tape::new(&self.params);
            let obj = self.dialog_objective(&mut tape, d, ctx, dual_scale)?;
            probe.terms.extend(tape.additive_terms(obj.root));
            probe.branches.extend(tape.branch_signature());
        }
        if self.config.arch == Arch::Parallel {
            let mut tape = Tape::new(&self.params);
            let loss = self.contrastive_objective(&mut tape, ctx)?;
            let weighted = tape.scale(loss, ctx.lambda_cl);
            probe.terms.extend(tape.additive_terms(weighted));
        }
        Ok(probe)
    }
}

fn dual_scale(batch: &[EncodedDialog]) -> f64 {
    let n_utts: usize = batch.iter().map(EncodedDialog::len).sum();
    1.0 / n_utts.max(1) as f64
}

struct DialogObjective {
    root: Var,
    ls: Var,
    la: Var,
    dual: Option<Var>,
}

/// See [`Model::loss_probe`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossProbe {
    pub terms: Vec<f64>,
    pub branches: Vec<usize>,
}

impl LossProbe {
    pub fn total(&self) -> f64 {
        self.terms.iter().sum()
    }
}
