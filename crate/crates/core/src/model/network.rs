//! Network assembly and forward passes on the tape.

use super::params::{glorot_uniform, Params};
use super::train::PreparedSample;
use super::{FusionMode, ModelConfig, Variant};
use crate::datagen::SampleSequence;
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvLstmVars, ConvLstmWeightVars, Tape, Tensor, Var};
use crate::voxel::VoxelGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_EPSILON: f64 = 1e-5;
const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// A built model: configuration plus named parameters. Mirror 2-D decoders
/// exist only on autoencoder builds (pretraining); reconstruction builds
/// carry encoders, fusion, the 3-D decoder, and the material head.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub params: Params,
    pub has_mirrors: bool,
}

/// Per-forward cache of tape leaves for the parameters actually used.
pub(crate) struct Session {
    vars: Vec<Option<Var>>,
}

impl Session {
    pub(crate) fn new(params: &Params) -> Self {
        Session {
            vars: vec![None; params.len()],
        }
    }

    fn var(&mut self, tape: &mut Tape, params: &Params, name: &str) -> Result<Var> {
        let idx = params.idx(name)?;
        if let Some(v) = self.vars[idx] {
            return Ok(v);
        }
        let v = tape.leaf(params.by_idx(idx));
        self.vars[idx] = Some(v);
        Ok(v)
    }

    /// Gradients per parameter index after a backward pass.
    pub(crate) fn collect_grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|slot| slot.and_then(|v| tape.grad(v).map(|g| g.to_vec())))
            .collect()
    }
}

/// Everything a reconstruction forward produces.
pub(crate) struct ForwardVars {
    pub occ: Var,
    pub logits: Option<Var>,
}

/// Forward products: the occupancy grid (with the predicted material for
/// audio-bearing variants) and the 4-way material distribution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub grid: VoxelGrid,
    pub material_distribution: Option<Vec<f64>>,
}

impl Network {
    /// Builds a reconstruction network (no mirror decoders).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Network> {
        Self::build_inner(config, seed, false)
    }

    /// Builds an autoencoder network: encoders plus mirror 2-D decoders.
    pub fn build_autoencoder(config: ModelConfig, seed: u64) -> Result<Network> {
        Self::build_inner(config, seed, true)
    }

    fn build_inner(config: ModelConfig, seed: u64, mirrors: bool) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let enc = &config.encoder;
        let (h1, h2) = enc.trace()?;
        let (c1, c2) = (enc.conv1.out_channels, enc.conv2.out_channels);

        let add_encoder = |params: &mut Params, rng: &mut ChaCha8Rng, m: &str| {
            let p = format!("enc.{m}");
            let k1 = enc.conv1.kernel;
            params.insert(
                &format!("{p}.conv1.k"),
                glorot_uniform(&[c1, 1, k1, k1], k1 * k1, c1 * k1 * k1, rng),
            );
            params.insert(&format!("{p}.conv1.b"), Tensor::zeros(&[c1]));
            params.insert(&format!("{p}.ln1.g"), Tensor::full(&[c1, h1, h1], 1.0));
            params.insert(&format!("{p}.ln1.b"), Tensor::zeros(&[c1, h1, h1]));
            let k2 = enc.conv2.kernel;
            params.insert(
                &format!("{p}.conv2.k"),
                glorot_uniform(&[c2, c1, k2, k2], c1 * k2 * k2, c2 * k2 * k2, rng),
            );
            params.insert(&format!("{p}.conv2.b"), Tensor::zeros(&[c2]));
            params.insert(&format!("{p}.ln2.g"), Tensor::full(&[c2, h2, h2], 1.0));
            params.insert(&format!("{p}.ln2.b"), Tensor::zeros(&[c2, h2, h2]));
            let kl = enc.lstm_kernel;
            let fan = c2 * kl * kl;
            for gate in GATES {
                params.insert(
                    &format!("{p}.lstm.wx_{gate}"),
                    glorot_uniform(&[c2, c2, kl, kl], fan, fan, rng),
                );
            }
            for gate in GATES {
                params.insert(
                    &format!("{p}.lstm.wh_{gate}"),
                    glorot_uniform(&[c2, c2, kl, kl], fan, fan, rng),
                );
            }
            for gate in GATES {
                // Forget gate opens at init so early steps retain state.
                let bias = if gate == "f" { 1.0 } else { 0.0 };
                params.insert(&format!("{p}.lstm.b_{gate}"), Tensor::full(&[c2], bias));
            }
            let flat = c2 * h2 * h2;
            params.insert(
                &format!("{p}.dense.w"),
                glorot_uniform(&[enc.feature_dim, flat], flat, enc.feature_dim, rng),
            );
            params.insert(&format!("{p}.dense.b"), Tensor::zeros(&[enc.feature_dim]));
        };

        let add_mirror = |params: &mut Params, rng: &mut ChaCha8Rng, m: &str| -> Result<()> {
            let p = format!("ae2d.{m}");
            let kt1 = mirror_kernel(h2, enc.conv2.stride, h1)?;
            let kt2 = mirror_kernel(h1, enc.conv1.stride, enc.input_size)?;
            params.insert(
                &format!("{p}.t1.k"),
                glorot_uniform(&[c2, c1, kt1, kt1], c2 * kt1 * kt1, c1 * kt1 * kt1, rng),
            );
            params.insert(&format!("{p}.t1.b"), Tensor::zeros(&[c1]));
            params.insert(&format!("{p}.ln.g"), Tensor::full(&[c1, h1, h1], 1.0));
            params.insert(&format!("{p}.ln.b"), Tensor::zeros(&[c1, h1, h1]));
            params.insert(
                &format!("{p}.t2.k"),
                glorot_uniform(&[c1, 1, kt2, kt2], c1 * kt2 * kt2, kt2 * kt2, rng),
            );
            params.insert(&format!("{p}.t2.b"), Tensor::zeros(&[1]));
            Ok(())
        };

        if config.variant.has_audio() {
            add_encoder(&mut params, &mut rng, "a");
            if mirrors {
                add_mirror(&mut params, &mut rng, "a")?;
            }
        }
        if config.variant.has_visual() {
            add_encoder(&mut params, &mut rng, "v");
            if mirrors {
                add_mirror(&mut params, &mut rng, "v")?;
            }
        }

        if !mirrors {
            if config.variant == Variant::AudioVisual && config.fusion.mode == FusionMode::Mfb {
                let proj = config.fusion.fused_dim * config.fusion.mfb_factor;
                for m in ["a", "v"] {
                    params.insert(
                        &format!("fuse.{m}.w"),
                        glorot_uniform(&[proj, enc.feature_dim], enc.feature_dim, proj, &mut rng),
                    );
                    params.insert(&format!("fuse.{m}.b"), Tensor::zeros(&[proj]));
                }
            }
            let dec = &config.decoder;
            let dec_in = config.decoder_input_dim();
            params.insert(
                "dec3d.dense.w",
                glorot_uniform(&[dec.seed_channels, dec_in], dec_in, dec.seed_channels, &mut rng),
            );
            params.insert("dec3d.dense.b", Tensor::zeros(&[dec.seed_channels]));
            let mut cin = dec.seed_channels;
            for (i, stage) in dec.stages.iter().enumerate() {
                let kvol = stage.kernel.pow(3);
                params.insert(
                    &format!("dec3d.s{i}.k"),
                    glorot_uniform(
                        &[cin, stage.out_channels, stage.kernel, stage.kernel, stage.kernel],
                        cin * kvol,
                        stage.out_channels * kvol,
                        &mut rng,
                    ),
                );
                params.insert(&format!("dec3d.s{i}.b"), Tensor::zeros(&[stage.out_channels]));
                cin = stage.out_channels;
            }
            if config.variant.has_audio() {
                params.insert(
                    "mat.w",
                    glorot_uniform(&[4, enc.feature_dim], enc.feature_dim, 4, &mut rng),
                );
                params.insert("mat.b", Tensor::zeros(&[4]));
            }
        }

        params.set_trainable(|_| true);
        Ok(Network {
            config,
            params,
            has_mirrors: mirrors,
        })
    }

    fn check_frames(&self, frames: &[Tensor]) -> Result<()> {
        if frames.is_empty() || frames.len() > 10 {
            return Err(Error::validation(format!(
                "sequences hold 1..=10 frames, got {}",
                frames.len()
            )));
        }
        let s = self.config.encoder.input_size;
        for f in frames {
            if f.shape() != [1, s, s] {
                return Err(Error::dimension(format!(
                    "frame shape {:?}, expected [1, {s}, {s}]",
                    f.shape()
                )));
            }
        }
        Ok(())
    }

    /// Conv stack + ConvLSTM over frames, final hidden flattened through
    /// the dense feature projection.
    pub(crate) fn encode_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        modality: &str,
        frames: &[Tensor],
    ) -> Result<Var> {
        self.check_frames(frames)?;
        let enc = &self.config.encoder;
        let (_, h2) = enc.trace()?;
        let c2 = enc.conv2.out_channels;
        let p = format!("enc.{modality}");
        let mut pv = |tape: &mut Tape, name: String| sess.var(tape, &self.params, &name);

        let weights = ConvLstmWeightVars {
            wx: [
                pv(tape, format!("{p}.lstm.wx_i"))?,
                pv(tape, format!("{p}.lstm.wx_f"))?,
                pv(tape, format!("{p}.lstm.wx_g"))?,
                pv(tape, format!("{p}.lstm.wx_o"))?,
            ],
            wh: [
                pv(tape, format!("{p}.lstm.wh_i"))?,
                pv(tape, format!("{p}.lstm.wh_f"))?,
                pv(tape, format!("{p}.lstm.wh_g"))?,
                pv(tape, format!("{p}.lstm.wh_o"))?,
            ],
            bias: [
                pv(tape, format!("{p}.lstm.b_i"))?,
                pv(tape, format!("{p}.lstm.b_f"))?,
                pv(tape, format!("{p}.lstm.b_g"))?,
                pv(tape, format!("{p}.lstm.b_o"))?,
            ],
        };
        let zeros = Tensor::zeros(&[c2, h2, h2]);
        let mut state = ConvLstmVars {
            hidden: tape.leaf(&zeros),
            cell: tape.leaf(&zeros),
        };
        for frame in frames {
            let hidden_pre = self.conv_stack(tape, sess, &p, frame)?;
            state = tape.conv_lstm_step(hidden_pre, state, &weights)?;
        }
        let flat = tape.reshape(state.hidden, &[c2 * h2 * h2])?;
        let w = sess.var(tape, &self.params, &format!("{p}.dense.w"))?;
        let b = sess.var(tape, &self.params, &format!("{p}.dense.b"))?;
        tape.dense(flat, w, b)
    }

    fn conv_stack(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        prefix: &str,
        frame: &Tensor,
    ) -> Result<Var> {
        let enc = &self.config.encoder;
        let x = tape.leaf(frame);
        let k1 = sess.var(tape, &self.params, &format!("{prefix}.conv1.k"))?;
        let b1 = sess.var(tape, &self.params, &format!("{prefix}.conv1.b"))?;
        let c1 = tape.conv2d(x, k1, Some(b1), enc.conv1.stride, enc.conv1.padding)?;
        let g1 = sess.var(tape, &self.params, &format!("{prefix}.ln1.g"))?;
        let bb1 = sess.var(tape, &self.params, &format!("{prefix}.ln1.b"))?;
        let n1 = tape.layer_norm(c1, g1, bb1, LN_EPSILON)?;
        let a1 = tape.activate(n1, Activation::Relu);
        let k2 = sess.var(tape, &self.params, &format!("{prefix}.conv2.k"))?;
        let b2 = sess.var(tape, &self.params, &format!("{prefix}.conv2.b"))?;
        let c2 = tape.conv2d(a1, k2, Some(b2), enc.conv2.stride, enc.conv2.padding)?;
        let g2 = sess.var(tape, &self.params, &format!("{prefix}.ln2.g"))?;
        let bb2 = sess.var(tape, &self.params, &format!("{prefix}.ln2.b"))?;
        let n2 = tape.layer_norm(c2, g2, bb2, LN_EPSILON)?;
        Ok(tape.activate(n2, Activation::Relu))
    }

    /// Mirror 2-D decoder from an LSTM hidden state back to a frame.
    fn decode2d_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        modality: &str,
        hidden: Var,
    ) -> Result<Var> {
        let enc = &self.config.encoder;
        let p = format!("ae2d.{modality}");
        let k1 = sess.var(tape, &self.params, &format!("{p}.t1.k"))?;
        let t1 = tape.conv2d_transpose(hidden, k1, enc.conv2.stride, 0)?;
        let b1 = sess.var(tape, &self.params, &format!("{p}.t1.b"))?;
        let t1 = tape.add_channel_bias(t1, b1)?;
        let g = sess.var(tape, &self.params, &format!("{p}.ln.g"))?;
        let b = sess.var(tape, &self.params, &format!("{p}.ln.b"))?;
        let n = tape.layer_norm(t1, g, b, LN_EPSILON)?;
        let a = tape.activate(n, Activation::Relu);
        let k2 = sess.var(tape, &self.params, &format!("{p}.t2.k"))?;
        let t2 = tape.conv2d_transpose(a, k2, enc.conv1.stride, 0)?;
        let b2 = sess.var(tape, &self.params, &format!("{p}.t2.b"))?;
        let t2 = tape.add_channel_bias(t2, b2)?;
        Ok(tape.activate(t2, Activation::Sigmoid))
    }

    /// Mean 2-D reconstruction MSE over the modalities this variant owns.
    pub(crate) fn autoencode_loss_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        sample: &PreparedSample,
    ) -> Result<Var> {
        if !self.has_mirrors {
            return Err(Error::usage(
                "autoencoder loss needs a network built with mirror decoders",
            ));
        }
        let enc = &self.config.encoder;
        let (_, h2) = enc.trace()?;
        let c2 = enc.conv2.out_channels;
        let mut losses = Vec::new();
        for (modality, frames) in [("a", &sample.audio), ("v", &sample.visual)] {
            if (modality == "a" && !self.config.variant.has_audio())
                || (modality == "v" && !self.config.variant.has_visual())
            {
                continue;
            }
            self.check_frames(frames)?;
            let p = format!("enc.{modality}");
            let weights = ConvLstmWeightVars {
                wx: [
                    sess.var(tape, &self.params, &format!("{p}.lstm.wx_i"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.wx_f"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.wx_g"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.wx_o"))?,
                ],
                wh: [
                    sess.var(tape, &self.params, &format!("{p}.lstm.wh_i"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.wh_f"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.wh_g"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.wh_o"))?,
                ],
                bias: [
                    sess.var(tape, &self.params, &format!("{p}.lstm.b_i"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.b_f"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.b_g"))?,
                    sess.var(tape, &self.params, &format!("{p}.lstm.b_o"))?,
                ],
            };
            let zeros = Tensor::zeros(&[c2, h2, h2]);
            let mut state = ConvLstmVars {
                hidden: tape.leaf(&zeros),
                cell: tape.leaf(&zeros),
            };
            let mut frame_losses = Vec::with_capacity(frames.len());
            for frame in frames {
                let features = self.conv_stack(tape, sess, &p, frame)?;
                state = tape.conv_lstm_step(features, state, &weights)?;
                let recon = self.decode2d_on_tape(tape, sess, modality, state.hidden)?;
                let target = tape.leaf(frame);
                frame_losses.push(tape.mse(recon, target)?);
            }
            let mut total = frame_losses[0];
            for &l in &frame_losses[1..] {
                total = tape.add(total, l)?;
            }
            losses.push(tape.scale(total, 1.0 / frames.len() as f64));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        Ok(tape.scale(total, 1.0 / losses.len() as f64))
    }

    pub(crate) fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        a: Var,
        v: Var,
    ) -> Result<Var> {
        match self.config.fusion.mode {
            FusionMode::Add => tape.add(a, v),
            FusionMode::Concat => tape.concat(a, v),
            FusionMode::Mfb => {
                let wa = sess.var(tape, &self.params, "fuse.a.w")?;
                let ba = sess.var(tape, &self.params, "fuse.a.b")?;
                let wv = sess.var(tape, &self.params, "fuse.v.w")?;
                let bv = sess.var(tape, &self.params, "fuse.v.b")?;
                let pa = tape.dense(a, wa, ba)?;
                let pv = tape.dense(v, wv, bv)?;
                let prod = tape.mul(pa, pv)?;
                let pooled = tape.sum_pool1d(prod, self.config.fusion.mfb_factor)?;
                let sq = tape.signed_sqrt(pooled);
                Ok(tape.l2_normalize(sq))
            }
        }
    }

    pub(crate) fn decode3d_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        feat: Var,
    ) -> Result<Var> {
        let dec = &self.config.decoder;
        let w = sess.var(tape, &self.params, "dec3d.dense.w")?;
        let b = sess.var(tape, &self.params, "dec3d.dense.b")?;
        let seed = tape.dense(feat, w, b)?;
        let mut x = tape.reshape(seed, &[dec.seed_channels, 1, 1, 1])?;
        let last = dec.stages.len() - 1;
        for (i, stage) in dec.stages.iter().enumerate() {
            let k = sess.var(tape, &self.params, &format!("dec3d.s{i}.k"))?;
            x = tape.conv3d_transpose(x, k, stage.stride, stage.padding)?;
            let bias = sess.var(tape, &self.params, &format!("dec3d.s{i}.b"))?;
            x = tape.add_channel_bias(x, bias)?;
            if i != last {
                x = tape.activate(x, Activation::Relu);
            }
        }
        let sig = tape.activate(x, Activation::Sigmoid);
        let e = dec.output_extent;
        tape.reshape(sig, &[e, e, e])
    }

    pub(crate) fn material_logits_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        a_feat: Var,
    ) -> Result<Var> {
        let w = sess.var(tape, &self.params, "mat.w")?;
        let b = sess.var(tape, &self.params, "mat.b")?;
        tape.dense(a_feat, w, b)
    }

    /// Full reconstruction forward from raw per-frame inputs.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        sample: &PreparedSample,
    ) -> Result<ForwardVars> {
        let a_feat = if self.config.variant.has_audio() {
            if sample.audio.is_empty() {
                return Err(Error::validation(
                    "variant consumes audio but the sample has none",
                ));
            }
            Some(self.encode_on_tape(tape, sess, "a", &sample.audio)?)
        } else {
            None
        };
        let v_feat = if self.config.variant.has_visual() {
            if sample.visual.is_empty() {
                return Err(Error::validation(
                    "variant consumes visual frames but the sample has none",
                ));
            }
            Some(self.encode_on_tape(tape, sess, "v", &sample.visual)?)
        } else {
            None
        };
        self.head_from_features(tape, sess, a_feat, v_feat)
    }

    /// Reconstruction forward from precomputed (frozen-encoder) features.
    pub(crate) fn forward_from_features(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        a_feat: Option<&Tensor>,
        v_feat: Option<&Tensor>,
    ) -> Result<ForwardVars> {
        let a = a_feat.map(|t| tape.leaf(t));
        let v = v_feat.map(|t| tape.leaf(t));
        self.head_from_features(tape, sess, a, v)
    }

    fn head_from_features(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        a_feat: Option<Var>,
        v_feat: Option<Var>,
    ) -> Result<ForwardVars> {
        let fused = match (self.config.variant, a_feat, v_feat) {
            (Variant::Audio, Some(a), _) => a,
            (Variant::Visual, _, Some(v)) => v,
            (Variant::AudioVisual, Some(a), Some(v)) => self.fuse_on_tape(tape, sess, a, v)?,
            _ => {
                return Err(Error::validation(
                    "sample modalities do not match the network variant",
                ))
            }
        };
        let occ = self.decode3d_on_tape(tape, sess, fused)?;
        let logits = match a_feat {
            Some(a) if self.config.variant.has_audio() => {
                Some(self.material_logits_on_tape(tape, sess, a)?)
            }
            _ => None,
        };
        Ok(ForwardVars { occ, logits })
    }

    /// Features for each modality with gradients off, used to cache the
    /// frozen-encoder stage.
    pub fn compute_features(&self, sample: &PreparedSample) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let mut a = None;
        let mut v = None;
        if self.config.variant.has_audio() {
            a = Some(self.encode_sequence("a", &sample.audio)?);
        }
        if self.config.variant.has_visual() {
            v = Some(self.encode_sequence("v", &sample.visual)?);
        }
        Ok((a, v))
    }

    /// Standalone sequence encoding (fresh tape, no gradients).
    pub fn encode_sequence(&self, modality: &str, frames: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&self.params);
        let feat = self.encode_on_tape(&mut tape, &mut sess, modality, frames)?;
        Ok(tape.value(feat).clone())
    }

    /// Standalone fusion of two feature vectors.
    pub fn fuse_features(&self, a_feat: &Tensor, v_feat: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&self.params);
        let a = tape.leaf(a_feat);
        let v = tape.leaf(v_feat);
        let fused = self.fuse_on_tape(&mut tape, &mut sess, a, v)?;
        Ok(tape.value(fused).clone())
    }

    /// Softmax distribution over the four materials from an audio feature.
    pub fn classify_material(&self, a_feat: &Tensor) -> Result<Vec<f64>> {
        if !self.config.variant.has_audio() {
            return Err(Error::usage(
                "material classification needs an audio branch (A or AV variant)",
            ));
        }
        let mut tape = Tape::new();
        let mut sess = Session::new(&self.params);
        let a = tape.leaf(a_feat);
        let logits = self.material_logits_on_tape(&mut tape, &mut sess, a)?;
        let dist = tape.softmax(logits)?;
        Ok(tape.value(dist).data().to_vec())
    }

    /// Deterministic forward pass to a voxel grid; the material label is
    /// set for audio-bearing variants and absent otherwise.
    pub fn reconstruct(&self, seq: &SampleSequence) -> Result<VoxelGrid> {
        let sample = super::train::prepare_sample(seq)?;
        self.reconstruct_prepared(&sample)
    }

    pub fn reconstruct_prepared(&self, sample: &PreparedSample) -> Result<VoxelGrid> {
        Ok(self.predict(sample)?.grid)
    }

    /// Loss (BCE + weighted material cross entropy) for one sample.
    pub(crate) fn recon_loss_on_tape(
        &self,
        tape: &mut Tape,
        fw: &ForwardVars,
        sample: &PreparedSample,
        material_weight: f64,
    ) -> Result<Var> {
        let target = tape.leaf(&sample.occupancy);
        let bce = tape.bce(fw.occ, target)?;
        match fw.logits {
            Some(logits) => {
                let ce = tape.cross_entropy_logits(logits, sample.material)?;
                let weighted = tape.scale(ce, material_weight);
                tape.add(bce, weighted)
            }
            None => Ok(bce),
        }
    }

    /// Training loss value for one sample (fresh tape, no gradients kept).
    pub fn loss_on_sample(&self, sample: &PreparedSample, material_weight: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&self.params);
        let fw = self.forward_on_tape(&mut tape, &mut sess, sample)?;
        let loss = self.recon_loss_on_tape(&mut tape, &fw, sample, material_weight)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss plus per-parameter gradients (indexed like `params`).
    pub fn loss_and_grads(
        &self,
        sample: &PreparedSample,
        material_weight: f64,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&self.params);
        let fw = self.forward_on_tape(&mut tape, &mut sess, sample)?;
        let loss = self.recon_loss_on_tape(&mut tape, &fw, sample, material_weight)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], sess.collect_grads(&tape)))
    }

    /// Full forward products for one sample.
    pub fn predict(&self, sample: &PreparedSample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&self.params);
        let fw = self.forward_on_tape(&mut tape, &mut sess, sample)?;
        let occ = tape.value(fw.occ).data().to_vec();
        let material_distribution = match fw.logits {
            Some(l) => {
                let dist = tape.softmax(l)?;
                Some(tape.value(dist).data().to_vec())
            }
            None => None,
        };
        let material = material_distribution.as_ref().map(|d| {
            let arg = d
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            crate::material::Material::ALL[arg]
        });
        Ok(Prediction {
            grid: VoxelGrid::new(occ, material)?,
            material_distribution,
        })
    }
}

/// Transposed kernel size that inverts a strided convolution's extent with
/// zero padding: `k = target - (n - 1) * stride`.
fn mirror_kernel(n: usize, stride: usize, target: usize) -> Result<usize> {
    let grown = (n - 1) * stride;
    if target <= grown {
        return Err(Error::config(format!(
            "mirror decoder cannot reach {target} from {n} at stride {stride}"
        )));
    }
    Ok(target - grown)
}
