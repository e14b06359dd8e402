//! Occlusion-aware memory-based refinement: aggregation of the previous
//! outputs with the current obstacle mask and features, a ConvLSTM memory,
//! and the residual feature refinement, driven frame by frame over a video.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::eigenlane::EigenlaneBasis;
use crate::error::{Error, Result};
use crate::geometry::LaneGeometry;
use crate::network::{self, Init, LaneMask, ModelConfig, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gate nonlinearities of the ConvLSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// `f, i, g` through the sigmoid and `o` through tanh.
    Printed,
    /// The usual ConvLSTM: `f, i, o` through the sigmoid and `g` through tanh.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmrConfig {
    pub gates: GateVariant,
    /// Feed the obstacle mask into the aggregation.
    pub use_obstacle_mask: bool,
    /// Use the ConvLSTM memory. Without it the aggregated map is added to
    /// the features directly: `F = F̃ + Z`.
    pub use_memory: bool,
}

impl Default for OmrConfig {
    fn default() -> Self {
        OmrConfig {
            gates: GateVariant::Printed,
            use_obstacle_mask: true,
            use_memory: true,
        }
    }
}

pub const GATES: [&str; 4] = ["f", "i", "g", "o"];

/// Names of the conv pair `(input conv, hidden conv)` of a gate: `w5/w6` for
/// `f` up to `w11/w12` for `o`.
pub fn gate_convs(gate: usize) -> (String, String) {
    (format!("omr.w{}", 5 + 2 * gate), format!("omr.w{}", 6 + 2 * gate))
}

pub(crate) fn init_params(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<()> {
    let k = cfg.k;
    let q = k / 4;
    let (h, w) = cfg.grid();
    let omr = &cfg.omr;
    init.conv("omr.w2", 1, q, 3, 1.0, Some(0.0))?;
    let mut z_in = q + 2 * k;
    if omr.use_obstacle_mask {
        init.conv("omr.w3", 1, q, 3, 1.0, Some(0.0))?;
        z_in += q;
    }
    // Without memory, Z is added straight onto F̃; start it at zero.
    let w4_gain = if omr.use_memory { 0.5 } else { 0.0 };
    init.conv("omr.w4", z_in, k, 3, w4_gain, Some(0.0))?;
    if !omr.use_memory {
        return Ok(());
    }
    // The gate that multiplies into h starts at zero so the refined features
    // begin equal to the intra-frame features.
    let silent = match omr.gates {
        GateVariant::Printed => 3,
        GateVariant::Standard => 2,
    };
    for gate in 0..4 {
        let gain = if gate == silent { 0.0 } else { 0.5 };
        let (wz, wh) = gate_convs(gate);
        init.conv(&wz, k, k, 3, gain, Some(0.0))?;
        init.conv(&wh, k, k, 3, gain, None)?;
    }
    init.store.insert("omr.h0", Tensor::zeros(&[k, h, w]))?;
    init.store.insert("omr.c0", Tensor::zeros(&[k, h, w]))?;
    Ok(())
}

/// Whether a parameter belongs to the refinement module.
pub fn is_omr_param(name: &str) -> bool {
    name.starts_with("omr.")
}

/// ConvLSTM hidden and cell state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Everything carried from one frame to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct CarriedState {
    pub frame_index: u64,
    pub l_prev: Tensor,
    pub f_prev: Tensor,
    /// Absent when the memory is disabled.
    pub memory: Option<RecurrentState>,
}

const STATE_MAGIC: &[u8; 8] = b"OMRSTAT1";

impl CarriedState {
    /// Opaque byte token for resuming a stream in another process.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = STATE_MAGIC.to_vec();
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.push(self.memory.is_some() as u8);
        self.l_prev.write_bytes(&mut out);
        self.f_prev.write_bytes(&mut out);
        if let Some(m) = &self.memory {
            m.h.write_bytes(&mut out);
            m.c.write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..8] != STATE_MAGIC {
            return Err(Error::Format("not a stream state token".into()));
        }
        let frame_index = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let has_memory = match bytes[16] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad memory flag {b}"))),
        };
        let tensors = crate::io::decode_tensors(&bytes[17..])?;
        let want = if has_memory { 4 } else { 2 };
        if tensors.len() != want {
            return Err(Error::Format(format!("state token holds {} tensors", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let l_prev = it.next().expect("checked length");
        let f_prev = it.next().expect("checked length");
        let memory = if has_memory {
            Some(RecurrentState {
                h: it.next().expect("checked length"),
                c: it.next().expect("checked length"),
            })
        } else {
            None
        };
        Ok(CarriedState {
            frame_index,
            l_prev,
            f_prev,
            memory,
        })
    }
}

/// Recurrent inputs of one frame as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub l_prev: Var,
    pub f_prev: Var,
    pub h: Option<Var>,
    pub c: Option<Var>,
}

impl StateVars {
    /// First-frame state: zero `L₀`, `F₀` and the learnable `h₁`, `c₁`.
    pub fn initial(net: &Network, tape: &mut Tape) -> Result<Self> {
        let (h, w) = net.cfg.grid();
        let l_prev = tape.constant(Tensor::zeros(&[1, h, w]));
        let f_prev = tape.constant(Tensor::zeros(&[net.cfg.k, h, w]));
        let (hv, cv) = if net.cfg.omr.use_memory {
            (Some(tape.param(net.store, "omr.h0")?), Some(tape.param(net.store, "omr.c0")?))
        } else {
            (None, None)
        };
        Ok(StateVars {
            l_prev,
            f_prev,
            h: hv,
            c: cv,
        })
    }

    /// Enter a carried state as constants (the truncation point of backprop).
    pub fn from_carried(tape: &mut Tape, s: &CarriedState) -> Self {
        StateVars {
            l_prev: tape.constant(s.l_prev.clone()),
            f_prev: tape.constant(s.f_prev.clone()),
            h: s.memory.as_ref().map(|m| tape.constant(m.h.clone())),
            c: s.memory.as_ref().map(|m| tape.constant(m.c.clone())),
        }
    }
}

/// Gate activations of one ConvLSTM step.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub f: Var,
    pub i: Var,
    pub g: Var,
    pub o: Var,
}

/// `Z = w4([w2(L_{t-1}), F_{t-1}, w3(Õ_t), F̃_t])`.
pub fn aggregate(net: &Network, tape: &mut Tape, l_prev: Var, f_prev: Var, o: Var, f_tilde: Var) -> Result<Var> {
    let lifted_l = net.conv(tape, "omr.w2", l_prev, 1)?;
    let mut parts = vec![lifted_l, f_prev];
    if net.cfg.omr.use_obstacle_mask {
        parts.push(net.conv(tape, "omr.w3", o, 1)?);
    }
    parts.push(f_tilde);
    let cat = tape.concat(&parts)?;
    net.conv(tape, "omr.w4", cat, 1)
}

/// One ConvLSTM update without peepholes. Returns `(h_t, c_t, gates)`.
pub fn convlstm_step(net: &Network, tape: &mut Tape, z: Var, h: Var, c: Var) -> Result<(Var, Var, Gates)> {
    let mut act = [z; 4];
    for (gate, slot) in act.iter_mut().enumerate() {
        let (wz, wh) = gate_convs(gate);
        let a = net.conv(tape, &wz, z, 1)?;
        let b = net.conv(tape, &wh, h, 1)?;
        let pre = tape.add(a, b)?;
        let tanh_gate = match net.cfg.omr.gates {
            GateVariant::Printed => 3,
            GateVariant::Standard => 2,
        };
        *slot = if gate == tanh_gate {
            tape.tanh(pre)
        } else {
            tape.sigmoid(pre)
        };
    }
    let [f, i, g, o] = act;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let h_next = tape.mul(o, c_next)?;
    Ok((h_next, c_next, Gates { f, i, g, o }))
}

/// `F_t = F̃_t + h_t`.
pub fn refine(tape: &mut Tape, f_tilde: Var, h: Var) -> Result<Var> {
    tape.add(f_tilde, h)
}

/// Wall-clock time per pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub encoding: Duration,
    pub obstacle: Duration,
    pub omr: Duration,
    pub decoding: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.encoding + self.obstacle + self.omr + self.decoding
    }

    pub fn add(&mut self, other: &StageTimes) {
        self.encoding += other.encoding;
        self.obstacle += other.obstacle;
        self.omr += other.omr;
        self.decoding += other.decoding;
    }
}

/// Intra-frame quantities of a frame, computed without gradient tracking
/// through the (frozen) encoder and obstacle head.
#[derive(Clone, Debug)]
pub struct IntraFrame {
    pub f_tilde: Tensor,
    pub s: Tensor,
    pub o: Tensor,
}

pub fn intra_frame(net: &Network, image: &Tensor, times: &mut StageTimes) -> Result<IntraFrame> {
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let f = net.encode(&mut tape, x)?;
    let t1 = Instant::now();
    let s = net.detect_obstacles(&mut tape, f)?;
    let s = tape.value(s).clone();
    let o = network::obstacle_mask(&s, net.cfg.obstacle_threshold);
    times.encoding += t1 - t0;
    times.obstacle += t1.elapsed();
    Ok(IntraFrame {
        f_tilde: tape.value(f).clone(),
        s,
        o,
    })
}

/// Tape variables of one refined frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub f_tilde: Var,
    pub o: Var,
    pub z: Var,
    pub f: Var,
    pub h: Option<Var>,
    pub c: Option<Var>,
    pub gates: Option<Gates>,
    pub p: Var,
    pub coeff: Var,
}

/// Aggregate, update memory, refine, and decode one frame on `tape`.
pub fn refine_frame(
    net: &Network,
    tape: &mut Tape,
    intra: &IntraFrame,
    prev: &StateVars,
    times: &mut StageTimes,
) -> Result<FrameVars> {
    let t0 = Instant::now();
    let f_tilde = tape.constant(intra.f_tilde.clone());
    let o = tape.constant(intra.o.clone());
    let z = aggregate(net, tape, prev.l_prev, prev.f_prev, o, f_tilde)?;
    let (f, h, c, gates) = match (prev.h, prev.c) {
        (Some(h), Some(c)) => {
            let (h, c, gates) = convlstm_step(net, tape, z, h, c)?;
            (refine(tape, f_tilde, h)?, Some(h), Some(c), Some(gates))
        }
        (None, None) => (tape.add(f_tilde, z)?, None, None, None),
        _ => return Err(Error::Usage("hidden and cell state must both be present".into())),
    };
    let t1 = Instant::now();
    let p = net.decode_prob(tape, f)?;
    let coeff = net.decode_coeff(tape, f)?;
    times.omr += t1 - t0;
    times.decoding += t1.elapsed();
    Ok(FrameVars {
        f_tilde,
        o,
        z,
        f,
        h,
        c,
        gates,
        p,
        coeff,
    })
}

/// Per-frame result of the refined pipeline.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub lanes: LaneMask,
    pub f: Tensor,
    pub p: Tensor,
    pub coeff: Tensor,
    pub intra: IntraFrame,
    pub state: CarriedState,
    pub times: StageTimes,
}

/// Push-frame / pull-output driver over one video.
pub struct VideoStream<'a> {
    net: Network<'a>,
    basis: &'a EigenlaneBasis,
    geom: LaneGeometry,
    state: Option<CarriedState>,
}

impl<'a> VideoStream<'a> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore, basis: &'a EigenlaneBasis) -> Result<Self> {
        Ok(VideoStream {
            net: Network::new(cfg, store, network::Mode::Eval),
            basis,
            geom: cfg.geometry()?,
            state: None,
        })
    }

    /// Resume from a token produced by [`CarriedState::to_bytes`].
    pub fn resume(
        cfg: &'a ModelConfig,
        store: &'a ParamStore,
        basis: &'a EigenlaneBasis,
        token: &[u8],
    ) -> Result<Self> {
        let mut s = Self::new(cfg, store, basis)?;
        let state = CarriedState::from_bytes(token)?;
        let (h, w) = cfg.grid();
        if state.l_prev.shape() != [1, h, w]
            || state.f_prev.shape() != [cfg.k, h, w]
            || state.memory.is_some() != cfg.omr.use_memory
        {
            return Err(Error::Incompatible("state token does not match the model".into()));
        }
        s.state = Some(state);
        Ok(s)
    }

    pub fn state(&self) -> Option<&CarriedState> {
        self.state.as_ref()
    }

    pub fn push_frame(&mut self, image: &Tensor) -> Result<FrameOutput> {
        let cfg = self.net.cfg;
        if image.shape() != [3, cfg.image_height, cfg.image_width] {
            return Err(Error::Input(format!(
                "frame shape {:?} differs from the stream's [3, {}, {}]",
                image.shape(),
                cfg.image_height,
                cfg.image_width
            )));
        }
        let mut times = StageTimes::default();
        let intra = intra_frame(&self.net, image, &mut times)?;
        let mut tape = Tape::new();
        let prev = match &self.state {
            Some(s) => StateVars::from_carried(&mut tape, s),
            None => StateVars::initial(&self.net, &mut tape)?,
        };
        let vars = refine_frame(&self.net, &mut tape, &intra, &prev, &mut times)?;
        let t0 = Instant::now();
        let p = tape.value(vars.p).clone();
        let coeff = tape.value(vars.coeff).clone();
        let lanes = network::nms_decode(&p, &coeff, self.basis, &self.geom, &cfg.nms)?;
        times.decoding += t0.elapsed();
        let f = tape.value(vars.f).clone();
        let memory = match (vars.h, vars.c) {
            (Some(h), Some(c)) => Some(RecurrentState {
                h: tape.value(h).clone(),
                c: tape.value(c).clone(),
            }),
            _ => None,
        };
        let state = CarriedState {
            frame_index: self.state.as_ref().map_or(0, |s| s.frame_index + 1),
            l_prev: lanes.mask.clone(),
            f_prev: f.clone(),
            memory,
        };
        self.state = Some(state.clone());
        Ok(FrameOutput {
            lanes,
            f,
            p,
            coeff,
            intra,
            state,
            times,
        })
    }
}

/// Run the refined pipeline over a whole video.
pub fn process_video(
    cfg: &ModelConfig,
    store: &ParamStore,
    basis: &EigenlaneBasis,
    frames: &[Tensor],
) -> Result<Vec<FrameOutput>> {
    if frames.is_empty() {
        return Err(Error::Input("video has no frames".into()));
    }
    let mut stream = VideoStream::new(cfg, store, basis)?;
    frames.iter().map(|f| stream.push_frame(f)).collect()
}

/// Per-frame output of the intra-frame pipeline (no refinement).
#[derive(Clone, Debug)]
pub struct IntraOutput {
    pub lanes: LaneMask,
    pub p: Tensor,
    pub coeff: Tensor,
    pub intra: IntraFrame,
}

pub fn process_intra(
    cfg: &ModelConfig,
    store: &ParamStore,
    basis: &EigenlaneBasis,
    frames: &[Tensor],
) -> Result<Vec<IntraOutput>> {
    let net = Network::new(cfg, store, network::Mode::Eval);
    let geom = cfg.geometry()?;
    let mut times = StageTimes::default();
    frames
        .iter()
        .map(|image| {
            let intra = intra_frame(&net, image, &mut times)?;
            let mut tape = Tape::new();
            let f = tape.constant(intra.f_tilde.clone());
            let p = net.decode_prob(&mut tape, f)?;
            let coeff = net.decode_coeff(&mut tape, f)?;
            let p = tape.value(p).clone();
            let coeff = tape.value(coeff).clone();
            let lanes = network::nms_decode(&p, &coeff, basis, &geom, &cfg.nms)?;
            Ok(IntraOutput { lanes, p, coeff, intra })
        })
        .collect()
}
