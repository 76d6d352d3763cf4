//! The dual-stream network: convolutional stem and space-time transformer over
//! frame tokens, GMM graph encoder over voxels, two bottleneck fusion stages
//! and a two-layer classification head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{run_blocks, Bound, Init, LayerNorm, Linear, ParamId, ParamStore, Real, Tape, TransformerBlock, Var};
use crate::representations::{FrameStack, PreprocessConfig, Sample, VoxelSet};
use crate::voxel_graph::{VoxelBranch, VoxelBranchConfig};

/// Which streams feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fused,
    ImageOnly,
    VoxelOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Fused, Mode::ImageOnly, Mode::VoxelOnly];

    pub fn uses_image(self) -> bool {
        self != Mode::VoxelOnly
    }

    pub fn uses_voxels(self) -> bool {
        self != Mode::ImageOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fused => "fused",
            Mode::ImageOnly => "image_only",
            Mode::VoxelOnly => "voxel_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Mode::Fused),
            "image_only" => Ok(Mode::ImageOnly),
            "voxel_only" => Ok(Mode::VoxelOnly),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode `{other}` (expected fused, image_only or voxel_only)"
            ))),
        }
    }
}

/// Architecture hyperparameters plus the preprocessing that produces its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfvConfig {
    pub preprocess: PreprocessConfig,
    /// Patch grid per frame, `(rows, cols)`; `N = rows · cols`.
    pub grid: (usize, usize),
    pub width: usize,
    pub heads: usize,
    pub st_depth: usize,
    pub fusion_depth: usize,
    /// Channels of the stride-2 stem convolutions before the final one to `width`.
    pub stem_channels: Vec<usize>,
    pub gmm_hidden: usize,
    pub gmm_kernels: usize,
    pub radius: f64,
    pub head_hidden: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for EfvConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            grid: (2, 4),
            width: 64,
            heads: 4,
            st_depth: 2,
            fusion_depth: 1,
            stem_channels: vec![16, 32],
            gmm_hidden: 64,
            gmm_kernels: 8,
            radius: 2.0,
            head_hidden: 256,
            classes: 10,
            seed: 0,
        }
    }
}

impl EfvConfig {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `T · N`.
    pub fn token_count(&self) -> usize {
        self.preprocess.frames * self.tokens_per_frame()
    }

    pub fn voxel_branch(&self) -> VoxelBranchConfig {
        VoxelBranchConfig {
            layer_widths: vec![self.gmm_hidden, self.width],
            kernels: self.gmm_kernels,
            radius: self.radius,
        }
    }

    /// Width of the flattened head input for `mode`.
    pub fn head_input(&self, mode: Mode) -> usize {
        let tn = self.token_count();
        let rows = match mode {
            Mode::Fused => 2 * tn + 1,
            Mode::ImageOnly => 2 * tn,
            Mode::VoxelOnly => tn + 1,
        };
        rows * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let p = &self.preprocess;
        if p.frames == 0 || p.frame_height == 0 || p.frame_width == 0 {
            return bad("frame stack dimensions must be positive".into());
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("patch grid must be non-empty".into());
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.gmm_hidden == 0 || self.gmm_kernels == 0 || self.head_hidden == 0 {
            return bad("hidden widths and kernel count must be positive".into());
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if p.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        p.cell.validate()
    }
}

/// Stride-2 3×3 convolutions with ReLU, pooled onto the patch grid and
/// normalized per token.
#[derive(Debug, Clone)]
pub struct Stem {
    pub convs: Vec<(ParamId, ParamId)>,
    pub norm: LayerNorm,
}

pub const STEM_KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct EfvModel {
    pub config: EfvConfig,
    pub mode: Mode,
    pub stem: Option<Stem>,
    /// `[T, N, d]` learnable location encoding.
    pub pos_embed: Option<ParamId>,
    pub st_blocks: Vec<TransformerBlock>,
    /// `[T, N, d]` bottleneck tokens.
    pub bottleneck: ParamId,
    pub fusion_one: Vec<TransformerBlock>,
    pub fusion_two: Vec<TransformerBlock>,
    pub voxel: Option<VoxelBranch>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

/// Outputs of the first fusion stage.
#[derive(Debug, Clone, Copy)]
pub struct StageOne {
    pub image: Var,
    pub bottleneck: Var,
}

impl EfvModel {
    /// Builds the model and its freshly initialized parameters from `config.seed`.
    pub fn new<F: Real>(config: EfvConfig, mode: Mode) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let (t, n) = (config.preprocess.frames, config.tokens_per_frame());

        let (stem, pos_embed, st_blocks) = if mode.uses_image() {
            let mut convs = Vec::new();
            let mut c_in = 2;
            for (i, &c_out) in config.stem_channels.iter().chain(std::iter::once(&d)).enumerate() {
                let fan_in = c_in * STEM_KERNEL * STEM_KERNEL;
                let fan = fan_in as f64;
                let w = store.add(format!("stem.conv{i}.weight"), &[c_out, fan_in], Init::Uniform((6.0 / fan).sqrt()), &mut rng);
                let b = store.add(format!("stem.conv{i}.bias"), &[c_out], Init::Uniform(1.0 / fan.sqrt()), &mut rng);
                convs.push((w, b));
                c_in = c_out;
            }
            let norm = LayerNorm::new(&mut store, "stem.norm", d, &mut rng);
            let pos = store.add("stem.pos_embed", &[t, n, d], Init::Normal(0.02), &mut rng);
            let blocks = (0..config.st_depth)
                .map(|l| TransformerBlock::new(&mut store, &format!("st.block{l}"), d, config.heads, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            (Some(Stem { convs, norm }), Some(pos), blocks)
        } else {
            (None, None, Vec::new())
        };

        let bottleneck = store.add("bottleneck.tokens", &[t, n, d], Init::Normal(0.02), &mut rng);
        let fusion_one = if mode.uses_image() {
            (0..config.fusion_depth)
                .map(|l| TransformerBlock::new(&mut store, &format!("fusion1.block{l}"), d, config.heads, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let voxel = if mode.uses_voxels() {
            Some(VoxelBranch::new(&mut store, "voxel", &config.voxel_branch(), d, &mut rng)?)
        } else {
            None
        };
        let fusion_two = (0..config.fusion_depth)
            .map(|l| TransformerBlock::new(&mut store, &format!("fusion2.block{l}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_hidden = Linear::new(&mut store, "head.fc1", config.head_input(mode), config.head_hidden, &mut rng);
        let head_out = Linear::new(&mut store, "head.fc2", config.head_hidden, config.classes, &mut rng);

        Ok((
            Self {
                config,
                mode,
                stem,
                pos_embed,
                st_blocks,
                bottleneck,
                fusion_one,
                fusion_two,
                voxel,
                head_hidden,
                head_out,
            },
            store,
        ))
    }

    fn check_frames(&self, frames: &FrameStack) -> Result<()> {
        let p = &self.config.preprocess;
        if frames.shape() != [p.frames, 2, p.frame_height, p.frame_width] || frames.data.len() != frames.shape().iter().product::<usize>() {
            return Err(Error::DimensionMismatch(format!(
                "frame stack {:?}, model expects [{}, 2, {}, {}]",
                frames.shape(),
                p.frames,
                p.frame_height,
                p.frame_width
            )));
        }
        Ok(())
    }

    /// Frame stack → `[T·N, d]` tokens with location encoding added.
    pub fn stem_embed<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, frames: &FrameStack) -> Result<Var> {
        let (stem, pos) = match (&self.stem, self.pos_embed) {
            (Some(s), Some(pos)) => (s, pos),
            _ => return Err(Error::InvalidConfig(format!("mode {} has no image branch", self.mode))),
        };
        self.check_frames(frames)?;
        let data = frames.data.iter().map(|&v| F::from_f64(v as f64)).collect();
        let mut x = tape.constant(data, &frames.shape());
        for &(w, b) in &stem.convs {
            let y = tape.conv2d(x, p.var(w), p.var(b), STEM_KERNEL, 2, 1)?;
            x = tape.relu(y);
        }
        let (gh, gw) = self.config.grid;
        let tokens = tape.pool_tokens(x, gh, gw)?;
        let tokens = stem.norm.forward(tape, p, tokens)?;
        let pos = tape.reshape(p.var(pos), &[self.config.token_count(), self.config.width])?;
        tape.add(tokens, pos)
    }

    /// Joint self-attention over all space-time tokens.
    pub fn st_transformer<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, tokens: Var) -> Result<Var> {
        run_blocks(&self.st_blocks, tape, p, tokens)
    }

    pub fn bottleneck_tokens<F: Real>(&self, tape: &mut Tape<F>, p: &Bound) -> Result<Var> {
        tape.reshape(p.var(self.bottleneck), &[self.config.token_count(), self.config.width])
    }

    /// `[X_image; X_bottleneck]` through the first fusion transformer, split back.
    pub fn fusion_stage_one<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, image: Var, bottleneck: Var) -> Result<StageOne> {
        if self.fusion_one.is_empty() {
            return Ok(StageOne { image, bottleneck });
        }
        let tn = self.config.token_count();
        let joint = tape.concat_rows(&[image, bottleneck])?;
        let fused = run_blocks(&self.fusion_one, tape, p, joint)?;
        Ok(StageOne {
            image: tape.slice_rows(fused, 0, tn)?,
            bottleneck: tape.slice_rows(fused, tn, tn)?,
        })
    }

    /// `[bottleneck; X_voxel]` (voxel token last) through the second fusion transformer.
    pub fn fusion_stage_two<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, bottleneck: Var, voxel: Option<Var>) -> Result<Var> {
        let joint = match voxel {
            Some(v) => tape.concat_rows(&[bottleneck, v])?,
            None => bottleneck,
        };
        run_blocks(&self.fusion_two, tape, p, joint)
    }

    /// Flattens the per-sample head input to `[1, D]`.
    fn flatten<F: Real>(&self, tape: &mut Tape<F>, parts: &[Var]) -> Result<Var> {
        let joint = if parts.len() == 1 { parts[0] } else { tape.concat_rows(parts)? };
        let n = tape.value(joint).len();
        tape.reshape(joint, &[1, n])
    }

    /// Runs both encoders and both fusion stages for one sample, returning the
    /// flattened head input `[1, D_mode]`.
    pub fn encode<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, sample: &Sample) -> Result<Var> {
        let bottleneck = self.bottleneck_tokens(tape, p)?;
        let stage_one = if self.mode.uses_image() {
            let tokens = self.stem_embed(tape, p, &sample.frames)?;
            let image = self.st_transformer(tape, p, tokens)?;
            Some(self.fusion_stage_one(tape, p, image, bottleneck)?)
        } else {
            None
        };
        let voxel = match &self.voxel {
            Some(branch) => Some(branch.forward(tape, p, &sample.voxels)?),
            None => None,
        };
        match stage_one {
            Some(s1) => {
                let f2 = self.fusion_stage_two(tape, p, s1.bottleneck, voxel)?;
                self.flatten(tape, &[f2, s1.image])
            }
            None => {
                let f2 = self.fusion_stage_two(tape, p, bottleneck, voxel)?;
                self.flatten(tape, &[f2])
            }
        }
    }

    /// Two-layer MLP with ReLU followed by log-softmax, over `[B, D]` rows.
    pub fn classify_head<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, features: Var) -> Result<Var> {
        let h = self.head_hidden.forward(tape, p, features)?;
        let h = tape.relu(h);
        let logits = self.head_out.forward(tape, p, h)?;
        Ok(tape.log_softmax(logits))
    }

    /// Log-probabilities `[B, classes]` for a batch of samples.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, samples: &[&Sample]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rows = samples
            .iter()
            .map(|s| self.encode(tape, p, s))
            .collect::<Result<Vec<_>>>()?;
        let features = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
        self.classify_head(tape, p, features)
    }

    /// Mean NLL of the samples' labels.
    pub fn loss<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, samples: &[&Sample]) -> Result<(Var, Var)> {
        let targets = labels(samples, self.config.classes)?;
        let log_probs = self.forward(tape, p, samples)?;
        Ok((tape.nll(log_probs, &targets)?, log_probs))
    }

    /// Every transformer block in the model.
    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.st_blocks.iter().chain(&self.fusion_one).chain(&self.fusion_two)
    }

    /// Convenience: inference on one sample without keeping the tape.
    pub fn predict<F: Real>(&self, store: &ParamStore<F>, sample: &Sample) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = self.forward(&mut tape, &p, &[sample])?;
        Ok(tape.value(out).to_vec())
    }

    /// Checks a voxel set is usable by this model's voxel branch.
    pub fn check_voxels(&self, voxels: &VoxelSet) -> Result<()> {
        if self.mode.uses_voxels() && voxels.is_empty() {
            return Err(Error::EmptyGraph);
        }
        Ok(())
    }
}

/// Extracts labels, rejecting unlabeled or out-of-range samples.
pub fn labels(samples: &[&Sample], classes: usize) -> Result<Vec<usize>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| match s.label {
            Some(l) if l < classes => Ok(l),
            Some(l) => Err(Error::InvalidConfig(format!("sample {i} has label {l} but the model has {classes} classes"))),
            None => Err(Error::InvalidConfig(format!("sample {i} has no label"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};
    use crate::test_support::{micro_config, random_sample};
    use rand::Rng;

    fn run<F: Real>(model: &EfvModel, store: &ParamStore<F>, samples: &[&Sample]) -> Vec<F> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, samples).unwrap();
        tape.value(out).to_vec()
    }

    fn zero(store: &mut ParamStore<f64>, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            store.values_mut(id).fill(0.0);
        }
    }

    #[test]
    fn default_head_widths() {
        let cfg = EfvConfig::default();
        assert_eq!(cfg.token_count(), 64);
        assert_eq!(cfg.head_input(Mode::Fused), 129 * 64);
        assert_eq!(cfg.head_input(Mode::ImageOnly), 128 * 64);
        assert_eq!(cfg.head_input(Mode::VoxelOnly), 65 * 64);
    }

    #[test]
    fn modes_create_only_their_parameters() {
        let cfg = micro_config();
        let names = |mode| {
            let (_, store) = EfvModel::new::<f32>(cfg.clone(), mode).unwrap();
            store.iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>()
        };
        let fused = names(Mode::Fused);
        let image = names(Mode::ImageOnly);
        let voxel = names(Mode::VoxelOnly);
        assert!(fused.iter().any(|n| n.starts_with("voxel.")) && fused.iter().any(|n| n.starts_with("stem.")));
        assert!(!image.iter().any(|n| n.starts_with("voxel.")));
        assert!(!voxel.iter().any(|n| n.starts_with("stem.") || n.starts_with("st.") || n.starts_with("fusion1.")));
        assert!(voxel.iter().any(|n| n.starts_with("fusion2.")));
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("both".parse::<Mode>(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = micro_config();
        cfg.heads = 3;
        assert!(matches!(EfvModel::new::<f32>(cfg, Mode::Fused), Err(Error::InvalidConfig(_))));
        let mut cfg = micro_config();
        cfg.grid = (0, 2);
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.preprocess.top_k = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_frames_embed_to_location_encoding() {
        let cfg = micro_config();
        let (model, mut store) = EfvModel::new::<f64>(cfg.clone(), Mode::Fused).unwrap();
        let biases: Vec<_> = model.stem.as_ref().unwrap().convs.iter().map(|c| c.1).collect();
        zero(&mut store, biases);
        let p = &cfg.preprocess;
        let frames = FrameStack::zeros(p.frames, p.frame_height, p.frame_width);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let out = model.stem_embed(&mut tape, &b, &frames).unwrap();
        assert_eq!(tape.shape(out), &[cfg.token_count(), cfg.width]);
        assert_eq!(tape.value(out), store.values(model.pos_embed.unwrap()));
    }

    #[test]
    fn stem_rejects_wrong_frame_shape() {
        let cfg = micro_config();
        let (model, store) = EfvModel::new::<f64>(cfg, Mode::Fused).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let frames = FrameStack::zeros(3, 8, 8);
        assert!(matches!(model.stem_embed(&mut tape, &b, &frames), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn zeroed_fusion_stage_one_returns_inputs() {
        let cfg = micro_config();
        let (model, mut store) = EfvModel::new::<f64>(cfg.clone(), Mode::Fused).unwrap();
        let ids: Vec<_> = model.fusion_one.iter().flat_map(|b| b.interior_params()).collect();
        zero(&mut store, ids);
        let sample = random_sample(&cfg, 1, 0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let tokens = model.stem_embed(&mut tape, &b, &sample.frames).unwrap();
        let image = model.st_transformer(&mut tape, &b, tokens).unwrap();
        let bottleneck = model.bottleneck_tokens(&mut tape, &b).unwrap();
        let s1 = model.fusion_stage_one(&mut tape, &b, image, bottleneck).unwrap();
        assert_eq!(tape.value(s1.image), tape.value(image));
        assert_eq!(tape.value(s1.bottleneck), tape.value(bottleneck));
        assert_eq!(tape.shape(s1.image), &[cfg.token_count(), cfg.width]);
    }

    #[test]
    fn zero_depth_is_identity() {
        let mut cfg = micro_config();
        cfg.st_depth = 0;
        cfg.fusion_depth = 0;
        let (model, store) = EfvModel::new::<f64>(cfg.clone(), Mode::Fused).unwrap();
        let sample = random_sample(&cfg, 2, 0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let tokens = model.stem_embed(&mut tape, &b, &sample.frames).unwrap();
        let image = model.st_transformer(&mut tape, &b, tokens).unwrap();
        assert_eq!(tape.value(image), tape.value(tokens));
        let out = model.forward(&mut tape, &b, &[&sample]).unwrap();
        assert_eq!(tape.shape(out), &[1, cfg.classes]);
    }

    #[test]
    fn batched_log_probabilities() {
        let cfg = micro_config();
        for mode in Mode::ALL {
            let (model, store) = EfvModel::new::<f64>(cfg.clone(), mode).unwrap();
            let samples: Vec<_> = (0..3).map(|i| random_sample(&cfg, 10 + i, i as usize)).collect();
            let refs: Vec<_> = samples.iter().collect();
            let out = run(&model, &store, &refs);
            assert_eq!(out.len(), 3 * cfg.classes);
            for (i, row) in out.chunks(cfg.classes).enumerate() {
                let total: f64 = row.iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-12);
                // batching does not mix samples
                let single = run(&model, &store, &[&samples[i]]);
                for (a, b) in row.iter().zip(&single) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn streams_reach_the_output() {
        let cfg = micro_config();
        let a = random_sample(&cfg, 20, 0);
        let mut other_voxels = a.clone();
        other_voxels.voxels = random_sample(&cfg, 21, 0).voxels;
        let mut other_frames = a.clone();
        other_frames.frames = random_sample(&cfg, 22, 0).frames;

        let (fused, store) = EfvModel::new::<f64>(cfg.clone(), Mode::Fused).unwrap();
        let base = run(&fused, &store, &[&a]);
        assert_ne!(base, run(&fused, &store, &[&other_voxels]));
        assert_ne!(base, run(&fused, &store, &[&other_frames]));

        let (image, store) = EfvModel::new::<f64>(cfg.clone(), Mode::ImageOnly).unwrap();
        let base = run(&image, &store, &[&a]);
        assert_eq!(base, run(&image, &store, &[&other_voxels]));
        assert_ne!(base, run(&image, &store, &[&other_frames]));

        let (voxel, store) = EfvModel::new::<f64>(cfg, Mode::VoxelOnly).unwrap();
        let base = run(&voxel, &store, &[&a]);
        assert_ne!(base, run(&voxel, &store, &[&other_voxels]));
        assert_eq!(base, run(&voxel, &store, &[&other_frames]));
    }

    #[test]
    fn gradients_reach_both_encoders() {
        let cfg = micro_config();
        let (model, store) = EfvModel::new::<f64>(cfg.clone(), Mode::Fused).unwrap();
        let samples = [random_sample(&cfg, 30, 1), random_sample(&cfg, 31, 2)];
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let (loss, _) = model.loss(&mut tape, &b, &[&samples[0], &samples[1]]).unwrap();
        let mut grads = tape.backward(loss);
        let grads = b.gradients(&store, &mut grads);
        for (id, p) in store.iter() {
            let norm: f64 = grads[id.0].iter().map(|g| g * g).sum();
            assert!(norm > 0.0, "no gradient reached {}", p.name);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = micro_config();
        let (m1, s1) = EfvModel::new::<f32>(cfg.clone(), Mode::Fused).unwrap();
        let (_, s2) = EfvModel::new::<f32>(cfg.clone(), Mode::Fused).unwrap();
        for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let sample = random_sample(&cfg, 40, 0);
        assert_eq!(run(&m1, &s1, &[&sample]), run(&m1, &s2, &[&sample]));
        let mut other = cfg;
        other.seed += 1;
        let (_, s3) = EfvModel::new::<f32>(other, Mode::Fused).unwrap();
        assert_ne!(s1.values(ParamId(0)), s3.values(ParamId(0)));
    }

    #[test]
    fn rejects_unlabeled_and_out_of_range_samples() {
        let cfg = micro_config();
        let (model, store) = EfvModel::new::<f64>(cfg.clone(), Mode::Fused).unwrap();
        let mut s = random_sample(&cfg, 50, 0);
        s.label = None;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        assert!(model.loss(&mut tape, &b, &[&s]).is_err());
        s.label = Some(cfg.classes);
        assert!(model.loss(&mut tape, &b, &[&s]).is_err());
        assert!(matches!(model.forward(&mut tape, &b, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn head_gradients() {
        let cfg = micro_config();
        let (model, mut store) = EfvModel::new::<f64>(cfg.clone(), Mode::VoxelOnly).unwrap();
        let width = cfg.head_input(Mode::VoxelOnly);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let x: Vec<f64> = (0..2 * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(
            &mut store,
            |tape, p| {
                let f = tape.constant(x.clone(), &[2, width]);
                let lp = model.classify_head(tape, p, f)?;
                tape.nll(lp, &[0, 2])
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
    }

    #[test]
    fn full_model_gradients() {
        let cfg = micro_config();
        let (model, mut store) = EfvModel::new::<f64>(cfg.clone(), Mode::Fused).unwrap();
        let samples = [random_sample(&cfg, 70, 1), random_sample(&cfg, 71, 2)];
        let report = grad_check(
            &mut store,
            |tape, p| Ok(model.loss(tape, p, &[&samples[0], &samples[1]])?.0),
            GradCheckOptions::fine(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
    }
}
