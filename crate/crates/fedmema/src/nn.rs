//! Network blocks: modality encoders, fusion decoder, pyramid decoder.
//!
//! All nets share a 4-level layout. The encoder captures features before each
//! downsample, so for a `s`-pixel image the pyramid has spatial sizes
//! `s, s/2, s/4, s/8` with channel widths `w, 2w, 4w, 8w`.
//!
//! A [`Session`] binds a [`ParamStore`] to tape leaves on demand, caching by
//! name: asking for the same parameter twice returns the same `Var`, so a
//! decoder applied to several pyramids (the shared auxiliary decoder, or a
//! batch loop) accumulates gradients into one leaf with no extra bookkeeping.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;
/// Modalities in canonical order; index is the protocol-wide modality id.
pub const MODALITIES: [&str; 4] = ["t1", "t1c", "t2", "flair"];

#[derive(Debug, Clone, Copy)]
pub struct NetConfig {
    pub base_width: usize,
    pub num_classes: usize,
    pub image_size: usize,
}

impl NetConfig {
    /// Channel width at level `l` (1-based).
    pub fn channels(&self, l: usize) -> usize {
        debug_assert!((1..=LEVELS).contains(&l));
        self.base_width << (l - 1)
    }

    /// Spatial extent at level `l` (1-based).
    pub fn extent(&self, l: usize) -> usize {
        self.image_size >> (l - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(8) || self.image_size < 8 {
            return Err(Error::config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        Ok(())
    }
}

/// Binds parameters to tape leaves for one forward/backward pass.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Session<'s> {
        Session { tape: Tape::new(), store, bound: BTreeMap::new() }
    }

    /// Leaf for a named parameter; cached, so repeated binds share gradients.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::data(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.tape.leaf(t)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Non-differentiable input.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    /// Backprop from `root` and collect gradients for every bound parameter.
    /// Parameters that did not participate get a zero gradient.
    pub fn backward_grads(&mut self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.tape.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bound {
            let g = match grads.take(var) {
                Some(g) => g,
                None => Tensor::zeros(self.tape.value(var).shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn init_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, k: usize) {
    let fan_in = ci * k * k;
    let w = kaiming_uniform(rng, fan_in, co * ci * k * k);
    store.insert(format!("{name}.w"), Tensor::from_vec(&[co, ci, k, k], w).unwrap());
    store.insert(format!("{name}.b"), Tensor::zeros(&[co]));
}

/// Two 3x3 convs per level, single-channel input. Names: `{prefix}b{l}.c{1,2}`.
pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) {
    let mut cin = 1;
    for l in 1..=LEVELS {
        let cout = cfg.channels(l);
        init_conv(store, rng, &format!("{prefix}b{l}.c1"), cout, cin, 3);
        init_conv(store, rng, &format!("{prefix}b{l}.c2"), cout, cout, 3);
        cin = cout;
    }
}

/// Decoder over a single feature pyramid. Names: `{prefix}d{3,2,1}`, `{prefix}head`.
pub fn init_pyramid_decoder(store: &mut ParamStore, prefix: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) {
    for l in (1..=3).rev() {
        let cl = cfg.channels(l);
        // cat(upsampled d_{l+1} [2*cl], skip_l [cl]) -> cl
        init_conv(store, rng, &format!("{prefix}d{l}"), cl, 3 * cl, 3);
    }
    init_conv(store, rng, &format!("{prefix}head"), cfg.num_classes, cfg.channels(1), 1);
}

/// Fusion decoder over four modality pyramids. Extra per-level 1x1 fusers:
/// `{prefix}l{l}.fuse`.
pub fn init_fusion_decoder(store: &mut ParamStore, prefix: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) {
    for l in 1..=LEVELS {
        let cl = cfg.channels(l);
        init_conv(store, rng, &format!("{prefix}l{l}.fuse"), cl, 4 * cl, 1);
    }
    init_pyramid_decoder(store, prefix, cfg, rng);
}

/// Run the encoder; returns features at levels 1..=4 (before each pool).
pub fn encoder_forward(sess: &mut Session, prefix: &str, _cfg: &NetConfig, x: Var) -> Result<[Var; LEVELS]> {
    let mut cur = x;
    let mut feats = Vec::with_capacity(LEVELS);
    for l in 1..=LEVELS {
        let w1 = sess.param(&format!("{prefix}b{l}.c1.w"))?;
        let b1 = sess.param(&format!("{prefix}b{l}.c1.b"))?;
        let c1 = sess.tape.conv2d(cur, w1, b1, 1)?;
        let a1 = sess.tape.relu(c1)?;
        let w2 = sess.param(&format!("{prefix}b{l}.c2.w"))?;
        let b2 = sess.param(&format!("{prefix}b{l}.c2.b"))?;
        let c2 = sess.tape.conv2d(a1, w2, b2, 1)?;
        let f = sess.tape.relu(c2)?;
        feats.push(f);
        if l < LEVELS {
            cur = sess.tape.avgpool2(f)?;
        }
    }
    Ok([feats[0], feats[1], feats[2], feats[3]])
}

/// Decode one pyramid of skip features to logits.
pub fn pyramid_decoder_forward(sess: &mut Session, prefix: &str, cfg: &NetConfig, skips: &[Var; LEVELS]) -> Result<Var> {
    let _ = cfg;
    let mut d = skips[3];
    for l in (1..=3).rev() {
        let up = sess.tape.upsample2(d)?;
        let cat = sess.tape.concat_channels(&[up, skips[l - 1]])?;
        let w = sess.param(&format!("{prefix}d{l}.w"))?;
        let b = sess.param(&format!("{prefix}d{l}.b"))?;
        let c = sess.tape.conv2d(cat, w, b, 1)?;
        d = sess.tape.relu(c)?;
    }
    let hw = sess.param(&format!("{prefix}head.w"))?;
    let hb = sess.param(&format!("{prefix}head.b"))?;
    sess.tape.conv2d(d, hw, hb, 0)
}

/// Fuse four modality pyramids level-wise with 1x1 convs, then decode.
/// Returns `(logits, fused per-level features)` — the fused features are what
/// anchor extraction pools over.
pub fn fusion_decoder_forward(
    sess: &mut Session,
    prefix: &str,
    cfg: &NetConfig,
    pyramids: &[[Var; LEVELS]],
) -> Result<(Var, [Var; LEVELS])> {
    if pyramids.len() != 4 {
        return Err(Error::shape("fusion_decoder_forward", format!("{} pyramids, want 4", pyramids.len())));
    }
    let mut fused = Vec::with_capacity(LEVELS);
    for l in 1..=LEVELS {
        let cat_in: Vec<Var> = pyramids.iter().map(|p| p[l - 1]).collect();
        let cat = sess.tape.concat_channels(&cat_in)?;
        let w = sess.param(&format!("{prefix}l{l}.fuse.w"))?;
        let b = sess.param(&format!("{prefix}l{l}.fuse.b"))?;
        fused.push(sess.tape.conv2d(cat, w, b, 0)?);
    }
    let skips = [fused[0], fused[1], fused[2], fused[3]];
    let logits = pyramid_decoder_forward(sess, prefix, cfg, &skips)?;
    Ok((logits, skips))
}
