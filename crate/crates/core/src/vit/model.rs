use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, PatchConfig};
use super::patch::patchify;
use crate::distill::init_head;
use crate::error::{Error, Result};
use crate::hts::{
    class_attention, class_attn_reweight, gumbel_keep, gumbel_noise, init_predictor, masked_attention, predict_keep_probs,
    predict_log_probs, prune_for_inference, update_mask, DecisionState, Relaxation, StageDecision, REWEIGHT_INIT,
};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// How a training-mode forward pass makes its keep/drop decisions.
#[derive(Clone, Copy, Debug)]
pub enum StageControl<'a, T> {
    /// Gumbel sampling with caller-provided noise `[B, N, 2]` per stage.
    Gumbel {
        noise: &'a [Tensor<T>],
        tau: T,
        relaxation: Relaxation,
    },
    /// Fixed per-stage decisions `[B, N]`, combined cumulatively.
    Fixed(&'a [Tensor<T>]),
}

/// Which tokens an inference forward pass keeps at each stage.
#[derive(Clone, Copy, Debug)]
pub enum InferKeep<'a, T> {
    /// The `⌈p^s·N⌉` survivors with the highest keep probability.
    TopK,
    /// Tokens whose entry in the per-stage mask `[B, N]` is one. Every image
    /// must keep the same number of tokens.
    Masks(&'a [Tensor<T>]),
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a, T> {
    /// All tokens computed, dropped ones masked out of attention.
    Train { control: StageControl<'a, T>, reweight: bool },
    /// Dropped tokens are physically removed.
    Infer(InferKeep<'a, T>),
}

impl<T> Mode<'_, T> {
    /// Training mode with every stage decision forced to "keep".
    pub fn dense_train() -> Self {
        Mode::Train {
            control: StageControl::Fixed(&[]),
            reweight: false,
        }
    }
}

/// Output of [`Vit::forward_features`].
pub struct Features<'t, T: Real> {
    /// Class-token feature after the final norm, `[B, C]`.
    pub feature: Var<'t, T>,
    pub decisions: DecisionState<T>,
    /// Cumulative stage masks `[B, N]` on the tape (training mode only).
    pub stage_masks: Vec<Var<'t, T>>,
    /// Head-averaged class attention of the last block, `[B, L]`, when
    /// reweighting ran.
    pub attn_cls: Option<Var<'t, T>>,
    /// Original-grid indices of surviving image tokens after each stage.
    pub survivors: Vec<Vec<Vec<usize>>>,
}

/// Vision transformer with optional token sparsification.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit<T> {
    pub patch: PatchConfig,
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn block_name(l: usize, part: &str) -> String {
    format!("blocks.{l}.{part}")
}

/// Xavier-uniform weights, zero bias.
fn init_linear<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) {
    let limit = (6.0 / (din + dout) as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::uniform(vec![din, dout], -limit, limit, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![dout]));
}

fn init_norm<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(format!("{name}.gain"), Tensor::ones(vec![dim]));
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![dim]));
}

fn linear<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.linear(p.get(&format!("{name}.weight"))?, Some(p.get(&format!("{name}.bias"))?))
}

fn norm<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.layer_norm(p.get(&format!("{name}.gain"))?, p.get(&format!("{name}.bias"))?, T::lit(LN_EPS))
}

impl<T: Real> Vit<T> {
    pub fn new(patch: PatchConfig, config: ModelConfig, seed: u64) -> Result<Self> {
        patch.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.embed_dim;
        let n = patch.num_patches();
        init_linear(&mut store, "patch", patch.patch_dim(), c, &mut rng);
        store.insert("cls", Tensor::trunc_normal(vec![1, 1, c], INIT_STD, &mut rng));
        store.insert("pos", Tensor::trunc_normal(vec![1, n + 1, c], INIT_STD, &mut rng));
        let hidden = c * config.mlp_ratio;
        for l in 0..config.depth {
            init_norm(&mut store, &block_name(l, "norm1"), c);
            for part in ["attn.q", "attn.k", "attn.v", "attn.proj"] {
                init_linear(&mut store, &block_name(l, part), c, c, &mut rng);
            }
            init_norm(&mut store, &block_name(l, "norm2"), c);
            init_linear(&mut store, &block_name(l, "mlp.fc1"), c, hidden, &mut rng);
            init_linear(&mut store, &block_name(l, "mlp.fc2"), hidden, c, &mut rng);
        }
        init_norm(&mut store, "norm", c);
        if let Some(s) = &config.sparsify {
            for stage in 0..s.num_stages() {
                init_predictor(&mut store, stage, c, &mut rng);
            }
            store.insert("reweight.lambda", Tensor::scalar(T::lit(REWEIGHT_INIT)));
        }
        init_head(&mut store, c, config.num_classes, config.bn_neck, &mut rng);
        Ok(Self {
            patch,
            config,
            params: store,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patch.num_patches()
    }

    pub fn num_stages(&self) -> usize {
        self.config.sparsify.as_ref().map_or(0, |s| s.num_stages())
    }

    pub fn cast<U: Real>(&self) -> Vit<U> {
        Vit {
            patch: self.patch.clone(),
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Replaces the keep ratio, leaving stage layers and weights intact.
    pub fn with_ratio(&self, base_ratio: f64) -> Result<Self> {
        let mut out = self.clone();
        if let Some(s) = &self.config.sparsify {
            out.config.sparsify = Some(s.with_ratio(base_ratio)?);
        }
        Ok(out)
    }

    /// Fresh Gumbel noise for every stage of a batch.
    pub fn sample_noise(&self, batch: usize, rng: &mut impl Rng) -> Vec<Tensor<T>> {
        (0..self.num_stages())
            .map(|_| gumbel_noise(vec![batch, self.num_patches(), 2], rng))
            .collect()
    }

    /// Patch embedding plus class token and positional embedding:
    /// `[B, N + 1, C]`.
    pub fn embed<'t>(&self, p: &Bound<'t, T>, images: &Tensor<T>) -> Result<Var<'t, T>> {
        let tape = p.get("cls")?.tape();
        let patches = patchify(images, &self.patch)?;
        let b = patches.shape()[0];
        let tokens = linear(p, "patch", tape.constant(patches))?;
        let cls = p.get("cls")?.broadcast_leading(b)?;
        let x = Var::concat(&[cls, tokens], 1)?;
        x.add(p.get("pos")?.broadcast_leading(b)?)
    }

    /// One pre-norm encoder block. Returns the block output and, when
    /// requested, the head-averaged class attention row.
    pub fn block<'t>(
        &self,
        p: &Bound<'t, T>,
        l: usize,
        x: Var<'t, T>,
        mask: Option<Var<'t, T>>,
        want_cls_attn: bool,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let heads = self.config.heads;
        let h = norm(p, &block_name(l, "norm1"), x)?;
        let q = linear(p, &block_name(l, "attn.q"), h)?;
        let k = linear(p, &block_name(l, "attn.k"), h)?;
        let v = linear(p, &block_name(l, "attn.v"), h)?;
        let a = masked_attention(q, k, v, mask, heads)?;
        let x = x.add(linear(p, &block_name(l, "attn.proj"), a)?)?;
        let cls_attn = if want_cls_attn {
            Some(class_attention(q, k, mask, heads)?)
        } else {
            None
        };
        let h = norm(p, &block_name(l, "norm2"), x)?;
        let h = linear(p, &block_name(l, "mlp.fc1"), h)?.gelu();
        let x = x.add(linear(p, &block_name(l, "mlp.fc2"), h)?)?;
        Ok((x, cls_attn))
    }

    /// Runs the encoder on `[B, d, H, W]` images and returns the class
    /// feature together with the sparsification record.
    pub fn forward_features<'t>(&self, p: &Bound<'t, T>, images: &Tensor<T>, mode: Mode<'_, T>) -> Result<Features<'t, T>> {
        match mode {
            Mode::Train { control, reweight } => self.forward_train(p, images, control, reweight),
            Mode::Infer(keep) => self.forward_infer(p, images, keep),
        }
    }

    fn forward_train<'t>(
        &self,
        p: &Bound<'t, T>,
        images: &Tensor<T>,
        control: StageControl<'_, T>,
        reweight: bool,
    ) -> Result<Features<'t, T>> {
        let mut x = self.embed(p, images)?;
        let tape: &'t Tape<T> = x.tape();
        let (b, n) = (x.shape()[0], self.num_patches());
        let schedule = self.config.sparsify.as_ref();
        let stage_layers = schedule.map_or(&[][..], |s| s.stage_layers());
        let reweight = reweight && schedule.is_some();
        let provided = match control {
            StageControl::Gumbel { noise, .. } => noise.len(),
            StageControl::Fixed(d) => d.len(),
        };
        if provided != 0 && provided != stage_layers.len() {
            return Err(Error::contract(format!(
                "{provided} stage inputs for {} stages",
                stage_layers.len()
            )));
        }

        let mut cum: Option<Var<'t, T>> = None;
        let mut full_mask: Option<Var<'t, T>> = None;
        let mut decisions = DecisionState::default();
        let mut stage_masks = Vec::new();
        let mut attn_cls = None;
        let all: Vec<usize> = (0..n).collect();
        for l in 0..self.config.depth {
            if let Some(s) = stage_layers.iter().position(|&sl| sl == l) {
                let image = x.narrow(1, 1, n)?;
                let log_pi = predict_log_probs(p, s, image, cum)?;
                let d = match control {
                    StageControl::Gumbel { noise, tau, relaxation } => gumbel_keep(log_pi, &noise[s], tau, relaxation)?,
                    StageControl::Fixed(d) if d.is_empty() => tape.constant(Tensor::ones(vec![b, n])),
                    StageControl::Fixed(d) => {
                        if d[s].shape() != [b, n] {
                            return Err(Error::shape("stage decision", &[b, n], d[s].shape()));
                        }
                        tape.constant(d[s].clone())
                    }
                };
                let m = match cum {
                    Some(c) => update_mask(c, d)?,
                    None => d,
                };
                cum = Some(m);
                full_mask = Some(Var::concat(&[tape.constant(Tensor::ones(vec![b, 1])), m], 1)?);
                let mv = m.value();
                decisions.stages.push(StageDecision {
                    pi: log_pi.value().map(|v| v.exp()),
                    mask: (*mv).clone(),
                });
                stage_masks.push(m);
            }
            let last = l + 1 == self.config.depth;
            let (y, a) = self.block(p, l, x, full_mask, last && reweight)?;
            x = y;
            attn_cls = a;
        }
        if let Some(a) = attn_cls {
            x = class_attn_reweight(x, a, p.get("reweight.lambda")?)?;
        }
        let survivors = decisions
            .stages
            .iter()
            .map(|st| {
                st.mask
                    .rows()
                    .map(|r| all.iter().copied().filter(|&i| r[i] > T::zero()).collect())
                    .collect()
            })
            .collect();
        let feature = norm(p, "norm", x.narrow(1, 0, 1)?.reshape(vec![b, self.config.embed_dim])?)?;
        Ok(Features {
            feature,
            decisions,
            stage_masks,
            attn_cls,
            survivors,
        })
    }

    fn forward_infer<'t>(&self, p: &Bound<'t, T>, images: &Tensor<T>, keep: InferKeep<'_, T>) -> Result<Features<'t, T>> {
        let mut x = self.embed(p, images)?;
        let (b, n) = (x.shape()[0], self.num_patches());
        let schedule = self.config.sparsify.as_ref();
        let stage_layers = schedule.map_or(&[][..], |s| s.stage_layers());
        if let InferKeep::Masks(m) = keep {
            if m.len() != stage_layers.len() {
                return Err(Error::contract(format!("{} masks for {} stages", m.len(), stage_layers.len())));
            }
        }
        let mut alive: Vec<Vec<usize>> = vec![(0..n).collect(); b];
        let mut decisions = DecisionState::default();
        let mut survivors = Vec::new();
        for l in 0..self.config.depth {
            if let Some(s) = stage_layers.iter().position(|&sl| sl == l) {
                let cur = alive[0].len();
                let (scores, k) = match keep {
                    InferKeep::TopK => {
                        let k = schedule.expect("stage implies schedule").keep_count(s, n);
                        if k >= cur {
                            (None, cur)
                        } else {
                            let pi = predict_keep_probs(p, s, x.narrow(1, 1, cur)?, None)?.value();
                            (Some((*pi).clone()), k)
                        }
                    }
                    InferKeep::Masks(m) => {
                        let m = &m[s];
                        if m.shape() != [b, n] {
                            return Err(Error::shape("stage mask", &[b, n], m.shape()));
                        }
                        let scores: Vec<T> = alive
                            .iter()
                            .enumerate()
                            .flat_map(|(bi, a)| a.iter().map(move |&i| m.data()[bi * n + i]))
                            .collect();
                        let counts: Vec<usize> = scores.chunks(cur).map(|r| r.iter().filter(|&&v| v > T::zero()).count()).collect();
                        if counts.iter().any(|&c| c != counts[0]) {
                            return Err(Error::contract(format!("uneven kept counts {counts:?}")));
                        }
                        let pi = Tensor::new(
                            vec![b, cur, 2],
                            scores.iter().flat_map(|&v| [T::one() - v, v]).collect(),
                        )?;
                        (Some(pi), counts[0])
                    }
                };
                let pi = match scores {
                    Some(pi) => {
                        let keep_prob = Tensor::new(vec![b, cur], pi.rows().map(|r| r[1]).collect())?;
                        let pruned = prune_for_inference(x, &keep_prob, &alive, k)?;
                        x = pruned.tokens;
                        alive = pruned.survivors;
                        pi
                    }
                    None => Tensor::from_fn(vec![b, cur, 2], |i| if i % 2 == 1 { T::one() } else { T::zero() }),
                };
                let mut mask = Tensor::zeros(vec![b, n]);
                for (bi, a) in alive.iter().enumerate() {
                    for &i in a {
                        mask.data_mut()[bi * n + i] = T::one();
                    }
                }
                decisions.stages.push(StageDecision { pi, mask });
                survivors.push(alive.clone());
            }
            x = self.block(p, l, x, None, false)?.0;
        }
        let feature = norm(p, "norm", x.narrow(1, 0, 1)?.reshape(vec![b, self.config.embed_dim])?)?;
        Ok(Features {
            feature,
            decisions,
            stage_masks: Vec::new(),
            attn_cls: None,
            survivors,
        })
    }

    /// Inference-mode class features on a throwaway tape.
    pub fn infer_features(&self, images: &Tensor<T>) -> Result<(Tensor<T>, DecisionState<T>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let f = self.forward_features(&p, images, Mode::Infer(InferKeep::TopK))?;
        Ok(((*f.feature.value()).clone(), f.decisions))
    }
}
