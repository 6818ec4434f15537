//! Pixel-space U-Net noise predictor and its trainable encoder copy.
//!
//! Parameter names: `time.*` and `text.*` for the conditioning embedding,
//! `enc.*` and `mid.*` for the encoder and middle block, `dec.*` and
//! `out.*` for the decoder.

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::grad::{Graph, Real, Tensor, Var};
use crate::params::{ones, trunc_normal, zeros, Bindings, ParamStore};
use crate::rng::Rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub text_embed_dim: usize,
    pub blocks_per_level: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 128,
            text_embed_dim: 64,
            blocks_per_level: 1,
            freq_dim: 32,
        }
    }
}

impl UNetConfig {
    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            in_channels: 3,
            base_channels: 4,
            channel_mults: vec![1, 2],
            time_embed_dim: 8,
            text_embed_dim: 6,
            blocks_per_level: 1,
            freq_dim: 4,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be nonempty and positive".into());
        }
        if self.base_channels == 0 || self.image_size == 0 || self.blocks_per_level == 0 {
            return bad("image_size, base_channels and blocks_per_level must be positive".into());
        }
        if self.in_channels != 3 {
            return bad(format!("in_channels must be 3, got {}", self.in_channels));
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 || self.time_embed_dim == 0 || self.text_embed_dim == 0 {
            return bad("freq_dim must be even and positive; embedding widths positive".into());
        }
        let div = 1usize << (self.levels() - 1);
        if self.image_size % div != 0 {
            return bad(format!(
                "image_size {} not divisible by {div} for {} levels",
                self.image_size,
                self.levels()
            ));
        }
        Ok(())
    }

    /// Channel count at each injection point: every encoder feature that
    /// feeds a skip connection, then the middle block.
    pub fn injection_channels(&self) -> Vec<usize> {
        let mut out = vec![self.base_channels];
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            out.extend(std::iter::repeat(c).take(self.blocks_per_level));
            if l + 1 < self.levels() {
                out.push(c);
            }
        }
        out.push(self.level_channels(self.levels() - 1));
        out
    }

    pub fn injection_count(&self) -> usize {
        self.injection_channels().len()
    }
}

/// Whether `name` belongs to the encoder or middle block.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("mid.")
}

struct Init<'a> {
    rng: &'a mut Rng,
    store: ParamStore,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.store
            .insert(format!("{name}.w"), trunc_normal(self.rng, &[cout, cin, k, k], INIT_STD));
        self.store.insert(format!("{name}.b"), zeros(&[cout]));
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.store
            .insert(format!("{name}.w"), trunc_normal(self.rng, &[out, inp], INIT_STD));
        self.store.insert(format!("{name}.b"), zeros(&[out]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.g"), ones(&[c]));
        self.store.insert(format!("{name}.b"), zeros(&[c]));
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, emb: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cout, cin, 3);
        self.linear(&format!("{name}.emb"), cout, emb);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1);
        }
    }
}

/// Fresh trainable base parameters.
pub fn init_base(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut init = Init {
        rng: &mut rng,
        store: ParamStore::new(),
    };
    let e = cfg.time_embed_dim;
    init.linear("time.lin1", e, cfg.freq_dim);
    init.linear("time.lin2", e, e);
    init.linear("text.proj", e, cfg.text_embed_dim);

    let c0 = cfg.base_channels;
    init.conv("enc.conv_in", c0, cfg.in_channels, 3);
    let mut skip_ch = vec![c0];
    let mut ch = c0;
    for l in 0..cfg.levels() {
        let cl = cfg.level_channels(l);
        for b in 0..cfg.blocks_per_level {
            init.resblock(&format!("enc.{l}.res{b}"), ch, cl, e);
            ch = cl;
            skip_ch.push(ch);
        }
        if l + 1 < cfg.levels() {
            init.conv(&format!("enc.{l}.down"), ch, ch, 3);
            skip_ch.push(ch);
        }
    }
    init.resblock("mid.res", ch, ch, e);

    for l in (0..cfg.levels()).rev() {
        let cl = cfg.level_channels(l);
        for b in 0..=cfg.blocks_per_level {
            let s = skip_ch.pop().expect("one skip per decoder block");
            init.resblock(&format!("dec.{l}.res{b}"), ch + s, cl, e);
            ch = cl;
        }
        if l > 0 {
            init.conv(&format!("dec.{l}.up"), ch, ch, 3);
        }
    }
    init.norm("out.norm", ch);
    init.conv("out.conv", cfg.in_channels, ch, 3);
    Ok(init.store)
}

/// Value-equal trainable copy of the encoder and middle block, under the
/// same names.
pub fn clone_trainable_copy<T: Real>(base: &ParamStore<T>) -> ParamStore<T> {
    let mut copy = ParamStore::new();
    for (name, t) in base.iter().filter(|(n, _)| is_encoder_param(n)) {
        copy.insert(name, t.clone().with_grad(true));
    }
    copy
}

/// `[N, freq_dim]` sinusoidal features of the timesteps.
pub fn timestep_features<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut row = vec![0.0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = step as f64 * freq;
            row[i] = a.sin();
            row[half + i] = a.cos();
        }
        data.extend(row.into_iter().map(T::of));
    }
    Tensor::new(vec![t.len(), dim], data).expect("length matches shape")
}

/// Graph-level view of a bound U-Net. `prefix` selects where encoder
/// parameters are looked up, which is how the trainable copy reuses this
/// code.
pub struct UNet<'a> {
    pub cfg: &'a UNetConfig,
    pub params: &'a Bindings,
}

impl UNet<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        g.conv2d(x, w, Some(b), 1, pad)
    }

    fn norm<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.g"))?;
        let beta = self.p(&format!("{name}.b"))?;
        g.channel_norm(x, gamma, beta)
    }

    fn resblock<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm(g, &format!("{name}.norm1"), x)?;
        let h = g.silu(h)?;
        let h = self.conv(g, &format!("{name}.conv1"), h, 1)?;
        let ew = self.p(&format!("{name}.emb.w"))?;
        let eb = self.p(&format!("{name}.emb.b"))?;
        let e = g.linear(emb, ew, Some(eb))?;
        let h = g.add_channel_bias(h, e)?;
        let h = self.norm(g, &format!("{name}.norm2"), h)?;
        let h = g.silu(h)?;
        let h = self.conv(g, &format!("{name}.conv2"), h, 1)?;
        let skip_name = format!("{name}.skip");
        let s = if self.params.var(&format!("{skip_name}.w")).is_ok() {
            self.conv(g, &skip_name, x, 0)?
        } else {
            x
        };
        g.add(h, s)
    }

    /// Conditioning vector after its activation, `[N, time_embed_dim]`,
    /// as consumed by every residual block.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, t: &[usize], text: Var) -> Result<Var> {
        let tf = g.constant(timestep_features(t, self.cfg.freq_dim));
        let h = g.linear(tf, self.p("time.lin1.w")?, Some(self.p("time.lin1.b")?))?;
        let h = g.silu(h)?;
        let h = g.linear(h, self.p("time.lin2.w")?, Some(self.p("time.lin2.b")?))?;
        let tx = g.linear(text, self.p("text.proj.w")?, Some(self.p("text.proj.b")?))?;
        let e = g.add(h, tx)?;
        g.silu(e)
    }

    /// Encoder features at every injection point (the last one is the
    /// middle block). `inject` is added right after the input convolution.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        emb: Var,
        inject: Option<Var>,
    ) -> Result<Vec<Var>> {
        let cfg = self.cfg;
        let mut h = self.conv(g, &format!("{prefix}enc.conv_in"), x, 1)?;
        if let Some(z) = inject {
            h = g.add(h, z)?;
        }
        let mut feats = vec![h];
        for l in 0..cfg.levels() {
            for b in 0..cfg.blocks_per_level {
                h = self.resblock(g, &format!("{prefix}enc.{l}.res{b}"), h, emb)?;
                feats.push(h);
            }
            if l + 1 < cfg.levels() {
                h = g.avgpool2x(h)?;
                h = self.conv(g, &format!("{prefix}enc.{l}.down"), h, 1)?;
                feats.push(h);
            }
        }
        h = self.resblock(g, &format!("{prefix}mid.res"), h, emb)?;
        feats.push(h);
        Ok(feats)
    }

    /// Decoder from injection-point features (as returned by `encode`) to
    /// the noise estimate.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, mut feats: Vec<Var>, emb: Var) -> Result<Var> {
        let cfg = self.cfg;
        let mut h = feats.pop().ok_or_else(|| Error::invalid("decode: no features"))?;
        for l in (0..cfg.levels()).rev() {
            for b in 0..=cfg.blocks_per_level {
                let s = feats
                    .pop()
                    .ok_or_else(|| Error::invalid("decode: too few skip features"))?;
                let hs = g.concat(h, s)?;
                h = self.resblock(g, &format!("dec.{l}.res{b}"), hs, emb)?;
            }
            if l > 0 {
                h = g.upsample_nearest2x(h)?;
                h = self.conv(g, &format!("dec.{l}.up"), h, 1)?;
            }
        }
        let h = self.norm(g, "out.norm", h)?;
        let h = g.silu(h)?;
        self.conv(g, "out.conv", h, 1)
    }

    pub fn check_input<T: Real>(&self, g: &Graph<T>, x: Var, t: &[usize], text: Var, steps: usize) -> Result<()> {
        let s = self.cfg.image_size;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [self.cfg.in_channels, s, s] || xs[0] != t.len() {
            return Err(Error::Shape {
                op: "denoiser input",
                lhs: xs.to_vec(),
                rhs: vec![t.len(), self.cfg.in_channels, s, s],
            });
        }
        let ts = g.shape(text);
        if ts != [t.len(), self.cfg.text_embed_dim] {
            return Err(Error::Shape {
                op: "denoiser text embedding",
                lhs: ts.to_vec(),
                rhs: vec![t.len(), self.cfg.text_embed_dim],
            });
        }
        if let Some(&bad) = t.iter().find(|&&v| v == 0 || v > steps) {
            return Err(Error::invalid(format!("timestep {bad} outside 1..={steps}")));
        }
        Ok(())
    }

    /// Frozen-branch forward: noise estimate plus the injection-point
    /// features.
    pub fn base_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        t: &[usize],
        text: Var,
        steps: usize,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(g, x, t, text, steps)?;
        let emb = self.embed(g, t, text)?;
        let feats = self.encode(g, "", x, emb, None)?;
        let eps = self.decode(g, feats.clone(), emb)?;
        Ok((eps, feats))
    }
}

/// The plain text-conditioned denoiser as a [`NoisePredictor`].
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub cfg: UNetConfig,
    pub params: ParamStore,
    pub steps: usize,
}

impl NoisePredictor for BaseModel {
    type Cond = ();

    fn predict(&self, g: &mut Graph, x_t: Var, t: &[usize], text: Var, _cond: &()) -> Result<Var> {
        let b = self.params.bind(g);
        let net = UNet {
            cfg: &self.cfg,
            params: &b,
        };
        Ok(net.base_forward(g, x_t, t, text, self.steps)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_seven_injection_points() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.injection_channels(), vec![32, 32, 32, 64, 64, 128, 128]);
    }

    #[test]
    fn rejects_indivisible_size() {
        let cfg = UNetConfig {
            image_size: 30,
            ..UNetConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn timestep_features_shape() {
        let f: Tensor<f64> = timestep_features(&[1, 5], 8);
        assert_eq!(f.shape(), &[2, 8]);
        assert!((f.data()[0] - 1f64.sin()).abs() < 1e-12);
    }
}
