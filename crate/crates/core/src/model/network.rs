use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Direction, ModelConfig, ModelError};
use crate::data::{FeatureSequence, MotionSequence};
use crate::diffcore::{NodeId, ParamId, ParamStore, Tape, Tensor, MASK_VALUE};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SelfAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CrossAttention {
    pub value: ParamId,
    pub output: ParamId,
    pub norm: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Branch {
    pub start: ParamId,
    pub attend: SelfAttention,
    pub gate_in: Linear,
    pub gate_out: Linear,
    pub cross: CrossAttention,
}

/// Parameter handles. Everything both task directions use appears once.
#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub audio_encoder: Linear,
    pub motion_encoder: Linear,
    pub style: ParamId,
    pub positional: ParamId,
    /// Projects audio-side streams: primal queries and dual keys.
    pub audio_qk: ParamId,
    /// Projects motion-side streams: dual queries and primal keys.
    pub motion_qk: ParamId,
    pub primal: Branch,
    pub dual: Branch,
    /// `None` when tied to the motion encoder.
    pub motion_decoder_weight: Option<ParamId>,
    pub motion_decoder_bias: ParamId,
    pub audio_decoder_hidden: Linear,
    /// `None` when tied to the audio encoder.
    pub audio_decoder_weight: Option<ParamId>,
    pub audio_decoder_bias: ParamId,
}

/// Nodes produced by one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// `T x V*3` motion (primal) or `T x B` features (dual).
    pub predicted: NodeId,
    /// Fused latent of the cross-modal block, `T x d`.
    pub fused: NodeId,
    /// Audio encoder output, `T x d`.
    pub audio_latent: NodeId,
    /// Motion encoder output, `T x d`.
    pub motion_latent: NodeId,
}

/// The joint animation / lip-reading network.
#[derive(Clone, Debug)]
pub struct DualTalker {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn uniform(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        self.store
            .register(name, Tensor::new(vec![rows, cols], data).expect("sized"))
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        self.store
            .register(name, Tensor::new(vec![rows, cols], data).expect("sized"))
    }

    fn constant(&mut self, name: &str, cols: usize, value: f64) -> ParamId {
        self.store.register(name, Tensor::filled(&[1, cols], value))
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> Linear {
        Linear {
            weight: self.uniform(&format!("{name}.weight"), rows, cols),
            bias: self.constant(&format!("{name}.bias"), cols, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(&format!("{name}.gain"), d, 1.0),
            bias: self.constant(&format!("{name}.bias"), d, 0.0),
        }
    }

    fn branch(&mut self, prefix: &str, c: &ModelConfig) -> Branch {
        let d = c.d;
        Branch {
            start: self.normal(&format!("{prefix}.start"), 1, d, 0.1),
            attend: SelfAttention {
                query: self.uniform(&format!("{prefix}.self_attention.query"), d, d),
                key: self.uniform(&format!("{prefix}.self_attention.key"), d, d),
                value: self.uniform(&format!("{prefix}.self_attention.value"), d, d),
                output: self.uniform(&format!("{prefix}.self_attention.output"), d, d),
                norm: self.norm(&format!("{prefix}.self_attention.norm"), d),
            },
            gate_in: self.linear(&format!("{prefix}.speaker_gate.in"), 2 * d, c.gate_hidden()),
            gate_out: self.linear(&format!("{prefix}.speaker_gate.out"), c.gate_hidden(), d),
            cross: CrossAttention {
                value: self.uniform(&format!("{prefix}.cross_attention.value"), d, d),
                output: self.uniform(&format!("{prefix}.cross_attention.output"), d, d),
                norm: self.norm(&format!("{prefix}.cross_attention.norm"), d),
                ff_in: self.linear(&format!("{prefix}.feed_forward.in"), d, c.ff_dim),
                ff_out: self.linear(&format!("{prefix}.feed_forward.out"), c.ff_dim, d),
                ff_norm: self.norm(&format!("{prefix}.feed_forward.norm"), d),
            },
        }
    }
}

impl DualTalker {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let audio_encoder = init.linear("audio_encoder", c.audio_dim, c.d);
        let motion_encoder = init.linear("motion_encoder", c.motion_dim(), c.d);
        let style = init.normal("style_table", c.speakers, c.d, 0.1);
        let positional = init.normal("positional_table", c.max_frames, c.d, 0.02);
        let audio_qk = init.uniform("fusion.audio_qk", c.d, c.d);
        let motion_qk = init.uniform("fusion.motion_qk", c.d, c.d);
        let primal = init.branch("primal", c);
        let dual = init.branch("dual", c);
        let motion_decoder_weight = (!c.share_transpose_codec)
            .then(|| init.uniform("motion_decoder.weight", c.d, c.motion_dim()));
        let motion_decoder_bias = init.constant("motion_decoder.bias", c.motion_dim(), 0.0);
        let audio_decoder_hidden = init.linear("audio_decoder.hidden", c.d, c.d);
        let audio_decoder_weight = (!c.share_transpose_codec)
            .then(|| init.uniform("audio_decoder.weight", c.d, c.audio_dim));
        let audio_decoder_bias = init.constant("audio_decoder.bias", c.audio_dim, 0.0);
        let ids = ParamIds {
            audio_encoder,
            motion_encoder,
            style,
            positional,
            audio_qk,
            motion_qk,
            primal,
            dual,
            motion_decoder_weight,
            motion_decoder_bias,
            audio_decoder_hidden,
            audio_decoder_weight,
            audio_decoder_bias,
        };
        Ok(Self { config, store, ids })
    }

    pub fn with_seed(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn branch(&self, dir: Direction) -> &Branch {
        match dir {
            Direction::Primal => &self.ids.primal,
            Direction::Dual => &self.ids.dual,
        }
    }

    /// Parameter ids used as query and key projections of the cross-modal
    /// attention in `dir`.
    pub fn cross_query_key(&self, dir: Direction) -> (ParamId, ParamId) {
        match dir {
            Direction::Primal => (self.ids.audio_qk, self.ids.motion_qk),
            Direction::Dual => (self.ids.motion_qk, self.ids.audio_qk),
        }
    }

    /// Ids of the audio encoder, motion encoder, style table and positional
    /// table, in that order.
    pub fn shared_encoder_ids(&self) -> [ParamId; 6] {
        [
            self.ids.audio_encoder.weight,
            self.ids.audio_encoder.bias,
            self.ids.motion_encoder.weight,
            self.ids.motion_encoder.bias,
            self.ids.style,
            self.ids.positional,
        ]
    }

    /// Effective motion decoder weight (`d x V*3`).
    pub fn motion_decoder_weight(&self) -> Tensor {
        match self.ids.motion_decoder_weight {
            Some(id) => self.store.value(id).clone(),
            None => self.store.value(self.ids.motion_encoder.weight).transpose(),
        }
    }

    /// Effective output weight of the audio decoder (`d x B`).
    pub fn audio_decoder_weight(&self) -> Tensor {
        match self.ids.audio_decoder_weight {
            Some(id) => self.store.value(id).clone(),
            None => self.store.value(self.ids.audio_encoder.weight).transpose(),
        }
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.param(&self.store, id)
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, l: Linear) -> Result<NodeId, ModelError> {
        let (w, b) = (self.p(tape, l.weight), self.p(tape, l.bias));
        Ok(tape.affine(x, w, b)?)
    }

    fn norm(&self, tape: &mut Tape, x: NodeId, n: Norm) -> Result<NodeId, ModelError> {
        let rows = tape.value(x).rows();
        let z = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
        let g = self.p(tape, n.gain);
        let g = tape.broadcast_rows(g, rows)?;
        let b = self.p(tape, n.bias);
        let b = tape.broadcast_rows(b, rows)?;
        let scaled = tape.mul(z, g)?;
        Ok(tape.add(scaled, b)?)
    }

    fn check_frames(&self, frames: usize) -> Result<(), ModelError> {
        if frames == 0 || frames > self.config.max_frames {
            return Err(ModelError::TooLong {
                frames,
                max: self.config.max_frames,
            });
        }
        Ok(())
    }

    fn positions(&self, tape: &mut Tape, start: usize, len: usize) -> Result<NodeId, ModelError> {
        self.check_frames(start + len)?;
        let table = self.p(tape, self.ids.positional);
        Ok(tape.slice_rows(table, start, len)?)
    }

    fn encode(
        &self,
        tape: &mut Tape,
        input: NodeId,
        enc: Linear,
        width: usize,
        first_frame: usize,
    ) -> Result<NodeId, ModelError> {
        let found = tape.value(input).cols();
        if found != width {
            return Err(ModelError::WidthMismatch {
                expected: width,
                found,
            });
        }
        let rows = tape.value(input).rows();
        let h = self.linear(tape, input, enc)?;
        let pos = self.positions(tape, first_frame, rows)?;
        Ok(tape.add(h, pos)?)
    }

    /// `X = A W + b + P[0..T)` for a `T x B` feature node.
    pub fn encode_audio(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId, ModelError> {
        self.encode(tape, features, self.ids.audio_encoder, self.config.audio_dim, 0)
    }

    /// `Y = M W + b + P[0..T)` for a `T x V*3` motion node.
    pub fn encode_motion(&self, tape: &mut Tape, motion: NodeId) -> Result<NodeId, ModelError> {
        self.encode(tape, motion, self.ids.motion_encoder, self.config.motion_dim(), 0)
    }

    /// Row `speaker` of the style table as a `1 x d` node.
    pub fn style_embed(&self, tape: &mut Tape, speaker: usize) -> Result<NodeId, ModelError> {
        let n = self.config.speakers;
        if speaker >= n {
            return Err(ModelError::SpeakerOutOfRange { speaker, speakers: n });
        }
        let mut onehot = Tensor::zeros(&[1, n]);
        onehot.data_mut()[speaker] = 1.0;
        let sel = tape.constant(onehot);
        let table = self.p(tape, self.ids.style);
        Ok(tape.matmul(sel, table)?)
    }

    /// Causal multi-head self-attention with residual and layer norm.
    pub fn self_attend(
        &self,
        tape: &mut Tape,
        stream: NodeId,
        dir: Direction,
    ) -> Result<NodeId, ModelError> {
        let rows = tape.value(stream).rows();
        self.check_frames(rows)?;
        let a = self.branch(dir).attend;
        let (wq, wk, wv) = (self.p(tape, a.query), self.p(tape, a.key), self.p(tape, a.value));
        let heads = multi_head(tape, stream, stream, wq, wk, wv, self.config.self_heads, Some(0))?;
        let wo = self.p(tape, a.output);
        let proj = tape.matmul(heads, wo)?;
        let res = tape.add(stream, proj)?;
        self.norm(tape, res, a.norm)
    }

    /// Speaker-aware gate: `sigmoid(MLP([s, x_t])) * x_t` for every row.
    pub fn speaker_modulate(
        &self,
        tape: &mut Tape,
        stream: NodeId,
        style: NodeId,
        dir: Direction,
    ) -> Result<NodeId, ModelError> {
        let d = self.config.d;
        let (sw, xw) = (tape.value(style).cols(), tape.value(stream).cols());
        if sw != d || xw != d || tape.value(style).rows() != 1 {
            return Err(ModelError::WidthMismatch {
                expected: d,
                found: if sw != d { sw } else { xw },
            });
        }
        let b = self.branch(dir);
        let rows = tape.value(stream).rows();
        let s = tape.broadcast_rows(style, rows)?;
        let joined = tape.concat_cols(s, stream)?;
        let h = self.linear(tape, joined, b.gate_in)?;
        let h = tape.relu(h)?;
        let g = self.linear(tape, h, b.gate_out)?;
        let g = tape.sigmoid(g)?;
        Ok(tape.mul(g, stream)?)
    }

    /// Cross-modal attention: queries from `queries`, keys and values from
    /// `context`, followed by the feed-forward sublayer.
    ///
    /// Query row `i` sits at absolute frame `first_query + i` and only sees
    /// context rows at or before that frame.
    pub fn cross_attend_at(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        context: NodeId,
        dir: Direction,
        first_query: usize,
    ) -> Result<NodeId, ModelError> {
        let (qw, cw) = (tape.value(queries).cols(), tape.value(context).cols());
        if qw != self.config.d || cw != self.config.d {
            return Err(ModelError::WidthMismatch {
                expected: self.config.d,
                found: if qw != self.config.d { qw } else { cw },
            });
        }
        let c = self.branch(dir).cross;
        let (q_id, k_id) = self.cross_query_key(dir);
        let (wq, wk, wv) = (self.p(tape, q_id), self.p(tape, k_id), self.p(tape, c.value));
        let heads = multi_head(
            tape,
            queries,
            context,
            wq,
            wk,
            wv,
            self.config.heads,
            Some(first_query),
        )?;
        let wo = self.p(tape, c.output);
        let proj = tape.matmul(heads, wo)?;
        let res = tape.add(queries, proj)?;
        let h = self.norm(tape, res, c.norm)?;
        let f = self.linear(tape, h, c.ff_in)?;
        let f = tape.relu(f)?;
        let f = self.linear(tape, f, c.ff_out)?;
        let res = tape.add(h, f)?;
        self.norm(tape, res, c.ff_norm)
    }

    /// [`DualTalker::cross_attend_at`] for equal-length streams starting at frame 0.
    pub fn cross_attend(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        context: NodeId,
        dir: Direction,
    ) -> Result<NodeId, ModelError> {
        let (tq, tc) = (tape.value(queries).rows(), tape.value(context).rows());
        if tq != tc {
            return Err(ModelError::LengthMismatch {
                expected: tq,
                found: tc,
            });
        }
        self.cross_attend_at(tape, queries, context, dir, 0)
    }

    /// `[start; history]`, the shifted-right input of the self-attention.
    fn past_stream(
        &self,
        tape: &mut Tape,
        history: Option<NodeId>,
        dir: Direction,
    ) -> Result<NodeId, ModelError> {
        let start = self.p(tape, self.branch(dir).start);
        Ok(match history {
            Some(h) => tape.concat_rows(start, h)?,
            None => start,
        })
    }

    /// Fusion for one direction: self-attend over the past stream, gate by
    /// speaker, attend from `queries` into it. Returns the fused latent.
    fn fuse(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        past: NodeId,
        speaker: usize,
        dir: Direction,
        first_query: usize,
    ) -> Result<NodeId, ModelError> {
        let attended = self.self_attend(tape, past, dir)?;
        let style = self.style_embed(tape, speaker)?;
        let gated = self.speaker_modulate(tape, attended, style, dir)?;
        self.cross_attend_at(tape, queries, gated, dir, first_query)
    }

    fn decode_motion(&self, tape: &mut Tape, fused: NodeId) -> Result<NodeId, ModelError> {
        let w = match self.ids.motion_decoder_weight {
            Some(id) => self.p(tape, id),
            None => {
                let enc = self.p(tape, self.ids.motion_encoder.weight);
                tape.transpose(enc)?
            }
        };
        let b = self.p(tape, self.ids.motion_decoder_bias);
        Ok(tape.affine(fused, w, b)?)
    }

    fn decode_audio(&self, tape: &mut Tape, fused: NodeId) -> Result<NodeId, ModelError> {
        let h = self.linear(tape, fused, self.ids.audio_decoder_hidden)?;
        let h = tape.relu(h)?;
        let w = match self.ids.audio_decoder_weight {
            Some(id) => self.p(tape, id),
            None => {
                let enc = self.p(tape, self.ids.audio_encoder.weight);
                tape.transpose(enc)?
            }
        };
        let b = self.p(tape, self.ids.audio_decoder_bias);
        Ok(tape.affine(h, w, b)?)
    }

    fn shifted_history(&self, tape: &mut Tape, latent: NodeId) -> Result<Option<NodeId>, ModelError> {
        let t = tape.value(latent).rows();
        Ok(if t > 1 {
            Some(tape.slice_rows(latent, 0, t - 1)?)
        } else {
            None
        })
    }

    /// Teacher-forced primal pass on already-encoded latents.
    pub fn primal_from_latents(
        &self,
        tape: &mut Tape,
        audio_latent: NodeId,
        motion_latent: NodeId,
        speaker: usize,
    ) -> Result<ForwardOutputs, ModelError> {
        let history = self.shifted_history(tape, motion_latent)?;
        let past = self.past_stream(tape, history, Direction::Primal)?;
        let fused = self.fuse(tape, audio_latent, past, speaker, Direction::Primal, 0)?;
        let predicted = self.decode_motion(tape, fused)?;
        Ok(ForwardOutputs {
            predicted,
            fused,
            audio_latent,
            motion_latent,
        })
    }

    /// Teacher-forced dual pass on already-encoded latents.
    pub fn dual_from_latents(
        &self,
        tape: &mut Tape,
        motion_latent: NodeId,
        audio_latent: NodeId,
        speaker: usize,
    ) -> Result<ForwardOutputs, ModelError> {
        let history = self.shifted_history(tape, audio_latent)?;
        let past = self.past_stream(tape, history, Direction::Dual)?;
        let fused = self.fuse(tape, motion_latent, past, speaker, Direction::Dual, 0)?;
        let predicted = self.decode_audio(tape, fused)?;
        Ok(ForwardOutputs {
            predicted,
            fused,
            audio_latent,
            motion_latent,
        })
    }

    fn check_pair(&self, features: &FeatureSequence, motion: &MotionSequence) -> Result<(), ModelError> {
        if features.frames() != motion.frames() {
            return Err(ModelError::LengthMismatch {
                expected: motion.frames(),
                found: features.frames(),
            });
        }
        if motion.vertices() != self.config.vertices {
            return Err(ModelError::WidthMismatch {
                expected: self.config.vertices,
                found: motion.vertices(),
            });
        }
        self.check_frames(motion.frames())
    }

    /// Encodes both modalities of a pair onto `tape`.
    pub fn encode_pair(
        &self,
        tape: &mut Tape,
        features: &FeatureSequence,
        motion: &MotionSequence,
    ) -> Result<(NodeId, NodeId), ModelError> {
        self.check_pair(features, motion)?;
        let a = tape.constant(features.values().clone());
        let m = tape.constant(motion.to_flat());
        Ok((self.encode_audio(tape, a)?, self.encode_motion(tape, m)?))
    }

    /// Teacher-forced speech-to-motion pass; `features` must already have
    /// `gt_motion.frames()` rows.
    pub fn forward_primal(
        &self,
        tape: &mut Tape,
        features: &FeatureSequence,
        speaker: usize,
        gt_motion: &MotionSequence,
    ) -> Result<ForwardOutputs, ModelError> {
        let (x, y) = self.encode_pair(tape, features, gt_motion)?;
        self.primal_from_latents(tape, x, y, speaker)
    }

    /// Teacher-forced motion-to-speech pass.
    pub fn forward_dual(
        &self,
        tape: &mut Tape,
        motion: &MotionSequence,
        speaker: usize,
        gt_features: &FeatureSequence,
    ) -> Result<ForwardOutputs, ModelError> {
        let (x, y) = self.encode_pair(tape, gt_features, motion)?;
        self.dual_from_latents(tape, y, x, speaker)
    }

    /// Frame-by-frame motion synthesis from features. Step `t` conditions on
    /// the audio at frame `t` and the `t` frames generated so far.
    pub fn generate_motion(
        &self,
        features: &FeatureSequence,
        speaker: usize,
    ) -> Result<MotionSequence, ModelError> {
        let t_total = features.frames();
        self.check_frames(t_total)?;
        if features.dim() != self.config.audio_dim {
            return Err(ModelError::WidthMismatch {
                expected: self.config.audio_dim,
                found: features.dim(),
            });
        }
        let width = self.config.motion_dim();
        let mut generated: Vec<f64> = Vec::with_capacity(t_total * width);
        for t in 0..t_total {
            let mut tape = Tape::unchecked();
            let a = tape.constant(row_tensor(features.values(), t));
            let x = self.encode_at(&mut tape, a, Modality::Audio, t)?;
            let history = if t > 0 {
                let m = tape.constant(Tensor::new(vec![t, width], generated.clone())?);
                Some(self.encode_motion(&mut tape, m)?)
            } else {
                None
            };
            let past = self.past_stream(&mut tape, history, Direction::Primal)?;
            let fused = self.fuse(&mut tape, x, past, speaker, Direction::Primal, t)?;
            let out = self.decode_motion(&mut tape, fused)?;
            generated.extend_from_slice(tape.value(out).data());
        }
        let flat = Tensor::new(vec![t_total, width], generated)?;
        Ok(MotionSequence::from_flat(&flat, 30.0)?)
    }

    /// Frame-by-frame feature synthesis from motion (lip reading).
    pub fn generate_audio(
        &self,
        motion: &MotionSequence,
        speaker: usize,
    ) -> Result<FeatureSequence, ModelError> {
        let t_total = motion.frames();
        self.check_frames(t_total)?;
        if motion.vertices() != self.config.vertices {
            return Err(ModelError::WidthMismatch {
                expected: self.config.vertices,
                found: motion.vertices(),
            });
        }
        let width = self.config.audio_dim;
        let flat = motion.to_flat();
        let mut generated: Vec<f64> = Vec::with_capacity(t_total * width);
        for t in 0..t_total {
            let mut tape = Tape::unchecked();
            let m = tape.constant(row_tensor(&flat, t));
            let y = self.encode_at(&mut tape, m, Modality::Motion, t)?;
            let history = if t > 0 {
                let a = tape.constant(Tensor::new(vec![t, width], generated.clone())?);
                Some(self.encode_audio(&mut tape, a)?)
            } else {
                None
            };
            let past = self.past_stream(&mut tape, history, Direction::Dual)?;
            let fused = self.fuse(&mut tape, y, past, speaker, Direction::Dual, t)?;
            let out = self.decode_audio(&mut tape, fused)?;
            generated.extend_from_slice(tape.value(out).data());
        }
        Ok(FeatureSequence::new(Tensor::new(vec![t_total, width], generated)?)?)
    }

    fn encode_at(
        &self,
        tape: &mut Tape,
        input: NodeId,
        modality: Modality,
        frame: usize,
    ) -> Result<NodeId, ModelError> {
        match modality {
            Modality::Audio => {
                self.encode(tape, input, self.ids.audio_encoder, self.config.audio_dim, frame)
            }
            Modality::Motion => {
                self.encode(tape, input, self.ids.motion_encoder, self.config.motion_dim(), frame)
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Modality {
    Audio,
    Motion,
}

fn row_tensor(t: &Tensor, row: usize) -> Tensor {
    Tensor::new(vec![1, t.cols()], t.row(row).to_vec()).expect("row")
}

/// Additive mask: query row `i` (absolute frame `first_query + i`) may not
/// see key rows after that frame.
fn causal_mask(queries: usize, keys: usize, first_query: usize) -> Option<Tensor> {
    let mut m = Tensor::zeros(&[queries, keys]);
    let data = m.data_mut();
    let mut any = false;
    for i in 0..queries {
        for j in (first_query + i + 1)..keys {
            data[i * keys + j] = MASK_VALUE;
            any = true;
        }
    }
    any.then_some(m)
}

/// Scaled dot-product attention of one head. Returns the attended values
/// and the attention weights.
pub fn attention_head(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    first_query: Option<usize>,
) -> Result<(NodeId, NodeId), ModelError> {
    let dk = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (dk as f64).sqrt())?;
    if let Some(offset) = first_query {
        let (tq, tk) = (tape.value(q).rows(), tape.value(k).rows());
        if let Some(mask) = causal_mask(tq, tk, offset) {
            let mask = tape.constant(mask);
            logits = tape.add(logits, mask)?;
        }
    }
    let weights = tape.softmax_rows(logits)?;
    Ok((tape.matmul(weights, v)?, weights))
}

/// Projects with per-head column blocks of `wq`/`wk`/`wv`, attends per head,
/// and concatenates the heads (before the output projection).
#[allow(clippy::too_many_arguments)]
pub fn multi_head(
    tape: &mut Tape,
    query_src: NodeId,
    kv_src: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    heads: usize,
    first_query: Option<usize>,
) -> Result<NodeId, ModelError> {
    let q = tape.matmul(query_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    let d = tape.value(q).cols();
    if d % heads != 0 {
        return Err(ModelError::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let mut out: Option<NodeId> = None;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let (head, _) = attention_head(tape, qh, kh, vh, first_query)?;
        out = Some(match out {
            Some(prev) => tape.concat_cols(prev, head)?,
            None => head,
        });
    }
    Ok(out.expect("at least one head"))
}
