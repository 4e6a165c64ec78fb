use std::collections::HashMap;

use crate::autodiff::{BatchNormConfig, NormMode, RunningStats, Tape, Tensor, Var, BCE_EPS};

use super::params::{init_tensor, BnEntry, Init, Parameter};
use super::{condition_map_on_tape, CUNetConfig, CunetError, ModelInputs, DEPTH};

/// Result of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Probability map `[B,1,G,G]`.
    pub output: Var,
    /// Tape handles of the parameters, aligned with [`CUNetModel::parameters`].
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CUNetModel {
    config: CUNetConfig,
    params: Vec<Parameter>,
    bn: Vec<BnEntry>,
    index: HashMap<String, usize>,
    bn_index: HashMap<String, usize>,
}

struct Builder {
    seed: u64,
    params: Vec<Parameter>,
    bn: Vec<BnEntry>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let value = init_tensor(self.seed, &name, shape, init);
        self.params.push(Parameter { name, value });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.add(format!("{name}.weight"), &[cout, cin, k, k], Init::HeUniform { fan_in: cin * k * k });
        self.add(format!("{name}.bias"), &[cout], Init::Zeros);
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) {
        // kernel 2, stride 2: every output sees exactly `cin` inputs
        self.add(format!("{name}.weight"), &[cin, cout, 2, 2], Init::HeUniform { fan_in: cin });
        self.add(format!("{name}.bias"), &[cout], Init::Zeros);
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::HeUniform { fan_in: fin } };
        self.add(format!("{name}.weight"), &[fout, fin], init);
        self.add(format!("{name}.bias"), &[fout], Init::Zeros);
    }

    fn batchnorm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.gamma"), &[c], Init::Ones);
        self.add(format!("{name}.beta"), &[c], Init::Zeros);
        self.bn.push(BnEntry {
            name: name.to_string(),
            stats: RunningStats::new(c),
        });
    }

    /// `attend` is `None` without attention, otherwise the number of key
    /// tokens; a single key makes the softmax constant, so only the value
    /// projection exists there.
    fn block(&mut self, prefix: &str, cin: usize, cout: usize, attend: Option<usize>) {
        self.conv(&format!("{prefix}.conv"), cin, cout, 3);
        self.batchnorm(&format!("{prefix}.bn"), cout);
        if let Some(keys) = attend {
            let parts: &[&str] = if keys == 1 { &["v"] } else { &["q", "k", "v"] };
            for part in parts {
                self.linear(&format!("{prefix}.attn.{part}"), cout, cout, false);
            }
        }
    }
}

/// Side of the pooled key grid at resolution `res`.
fn key_side(res: usize, budget: usize) -> usize {
    res.min(((budget as f64).sqrt().floor() as usize).max(1))
}

fn index_of<I: Iterator<Item = String>>(names: I) -> HashMap<String, usize> {
    names.enumerate().map(|(i, n)| (n, i)).collect()
}

impl CUNetModel {
    pub fn build(config: CUNetConfig) -> Result<Self, CunetError> {
        config.validate()?;
        let v = config.variant;
        let b = config.base_channels;
        let plan = config.channel_plan();
        let bott = config.bottleneck_channels();
        let cond_c = v.condition_channels(config.k);
        let attend = v.has_condition();
        let keys = |level: usize| attend.then(|| key_side(config.padded_g() >> level, config.attention_token_budget).pow(2));
        let mut m = Builder {
            seed: config.seed,
            params: Vec::new(),
            bn: Vec::new(),
        };

        m.conv("stem.input", 1, b, 3);
        if attend {
            m.conv("stem.cond", cond_c, b, 3);
            m.conv("cond.0", cond_c, plan[0], 3);
            for l in 1..=DEPTH {
                let cout = if l < DEPTH { plan[l] } else { bott };
                m.conv(&format!("cond.{l}"), plan[l - 1], cout, 3);
            }
        }
        let mut cin = if attend { 2 * b } else { b };
        for (l, &c) in plan.iter().enumerate() {
            m.block(&format!("enc.{l}"), cin, c, keys(l));
            cin = c;
        }
        m.block("bottleneck", cin, bott, keys(DEPTH));
        let mut deeper = bott;
        for l in (0..DEPTH).rev() {
            let c = plan[l];
            m.conv_t(&format!("dec.{l}.up"), deeper, c);
            m.block(&format!("dec.{l}"), 2 * c, c, keys(l));
            deeper = c;
        }
        m.conv("head", b, 1, 1);
        if v.modulates() {
            let mut fin = config.k;
            for i in 0..config.mlp_layers {
                m.linear(&format!("film.mlp.{i}"), fin, config.mlp_hidden, false);
                fin = config.mlp_hidden;
            }
            for (s, w) in config.modulation_widths().into_iter().enumerate() {
                m.linear(&format!("film.proj.{s}"), fin, 2 * w, true);
            }
        }
        Self::from_parts(config, m.params, m.bn)
    }

    /// Reassembles a model from stored arrays (used by checkpoint loading).
    pub fn from_parts(config: CUNetConfig, params: Vec<Parameter>, bn: Vec<BnEntry>) -> Result<Self, CunetError> {
        let index = index_of(params.iter().map(|p| p.name.clone()));
        let bn_index = index_of(bn.iter().map(|e| e.name.clone()));
        if index.len() != params.len() || bn_index.len() != bn.len() {
            return Err(CunetError::InvalidConfig("duplicate parameter names".into()));
        }
        Ok(Self {
            config,
            params,
            bn,
            index,
            bn_index,
        })
    }

    pub fn config(&self) -> &CUNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn batchnorm_stats(&self) -> &[BnEntry] {
        &self.bn
    }

    pub fn batchnorm_stats_mut(&mut self) -> &mut [BnEntry] {
        &mut self.bn
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records a forward pass. Batch-norm statistics are read from (eval) or
    /// folded into (train) `stats`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<f32>,
        inputs: &ModelInputs,
        mode: NormMode,
        stats: &mut [BnEntry],
        trainable: bool,
    ) -> Result<Forward, CunetError> {
        inputs.check(self.config.g, self.config.k)?;
        if stats.len() != self.bn.len() {
            return Err(CunetError::ShapeMismatch("batch-norm state does not match model".into()));
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let mut ctx = Ctx {
            tape,
            vars: &vars,
            index: &self.index,
            bn_index: &self.bn_index,
            stats,
            mode,
            budget: self.config.attention_token_budget,
        };
        let output = ctx.network(&self.config, inputs)?;
        Ok(Forward { output, params: vars })
    }

    /// Train-mode forward; running statistics are updated in place.
    pub fn forward_train(&mut self, tape: &mut Tape<f32>, inputs: &ModelInputs) -> Result<Forward, CunetError> {
        let mut stats = self.bn.clone();
        let fwd = self.forward_on_tape(tape, inputs, NormMode::Train, &mut stats, true)?;
        self.bn = stats;
        Ok(fwd)
    }

    /// Frozen-model inference with running statistics; `[B,1,G,G]`.
    pub fn predict(&self, inputs: &ModelInputs) -> Result<Tensor<f32>, CunetError> {
        let mut tape = Tape::new();
        let mut stats = self.bn.clone();
        let fwd = self.forward_on_tape(&mut tape, inputs, NormMode::Eval, &mut stats, false)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// `(γ_l, β_l)` for the nine modulated blocks, each `[B, C_l]`.
    pub fn modulation_params(&self, sir: &Tensor<f32>) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>, CunetError> {
        if !self.config.variant.modulates() {
            return Err(CunetError::InvalidConfig(format!(
                "variant {} has no modulation head",
                self.config.variant
            )));
        }
        if sir.rank() != 2 || sir.shape()[1] != self.config.k {
            return Err(CunetError::ShapeMismatch(format!(
                "sir {:?}, expected [B, {}]",
                sir.shape(),
                self.config.k
            )));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut stats = self.bn.clone();
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            index: &self.index,
            bn_index: &self.bn_index,
            stats: &mut stats,
            mode: NormMode::Eval,
            budget: self.config.attention_token_budget,
        };
        let s = ctx.tape.constant(sir.clone());
        let pairs = ctx.modulation(&self.config, s)?;
        Ok(pairs
            .into_iter()
            .map(|(g, b)| (tape.value(g).clone(), tape.value(b).clone()))
            .collect())
    }
}

struct Ctx<'a> {
    tape: &'a mut Tape<f32>,
    vars: &'a [Var],
    index: &'a HashMap<String, usize>,
    bn_index: &'a HashMap<String, usize>,
    stats: &'a mut [BnEntry],
    mode: NormMode,
    budget: usize,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var, CunetError> {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        Ok(self.tape.conv2d(x, w, b, stride, pad)?)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var, CunetError> {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        Ok(self.tape.linear(x, w, b)?)
    }

    fn batchnorm(&mut self, x: Var, name: &str) -> Result<Var, CunetError> {
        let (g, b) = (self.p(&format!("{name}.gamma")), self.p(&format!("{name}.beta")));
        let stats = &mut self.stats[self.bn_index[name]].stats;
        Ok(self
            .tape
            .batchnorm2d(x, g, b, stats, self.mode, BatchNormConfig::default())?)
    }

    /// Residual cross-attention from block features to pooled condition
    /// features of the same resolution and width.
    fn attend(&mut self, h: Var, cond: Var, prefix: &str) -> Result<Var, CunetError> {
        let (b, c, hh, ww) = self.tape.value(h).dims4()?;
        let side = key_side(hh, self.budget);
        let pooled = if side == hh {
            cond
        } else {
            self.tape.adaptive_avg_pool(cond, side, side)?
        };
        let kvt = self.tape.to_tokens(pooled)?;
        if side == 1 {
            let v = self.linear(kvt, &format!("{prefix}.attn.v"))?;
            let v = self.tape.reshape(v, &[b, c])?;
            let a = self.tape.tile_vector_to_map(v, hh, ww)?;
            return Ok(self.tape.add(h, a)?);
        }
        let qt = self.tape.to_tokens(h)?;
        let q = self.linear(qt, &format!("{prefix}.attn.q"))?;
        let k = self.linear(kvt, &format!("{prefix}.attn.k"))?;
        let v = self.linear(kvt, &format!("{prefix}.attn.v"))?;
        let a = self.tape.cross_attention(q, k, v)?;
        let a = self.tape.from_tokens(a, hh, ww)?;
        Ok(self.tape.add(h, a)?)
    }

    fn block(&mut self, x: Var, prefix: &str, cond: Option<Var>, film: Option<(Var, Var)>) -> Result<Var, CunetError> {
        let h = self.conv(x, &format!("{prefix}.conv"), 1, 1)?;
        let h = self.batchnorm(h, &format!("{prefix}.bn"))?;
        let mut h = self.tape.relu(h);
        if let Some(c) = cond {
            h = self.attend(h, c, prefix)?;
        }
        if let Some((g, b)) = film {
            h = self.tape.film_modulate(h, g, b)?;
        }
        Ok(h)
    }

    fn modulation(&mut self, cfg: &CUNetConfig, sir: Var) -> Result<Vec<(Var, Var)>, CunetError> {
        let mut hidden = sir;
        for i in 0..cfg.mlp_layers {
            let z = self.linear(hidden, &format!("film.mlp.{i}"))?;
            hidden = self.tape.relu(z);
        }
        let mut out = Vec::with_capacity(9);
        for (s, w) in cfg.modulation_widths().into_iter().enumerate() {
            let gb = self.linear(hidden, &format!("film.proj.{s}"))?;
            let g = self.tape.narrow_columns(gb, 0, w)?;
            let b = self.tape.narrow_columns(gb, w, w)?;
            out.push((g, b));
        }
        Ok(out)
    }

    fn network(&mut self, cfg: &CUNetConfig, inputs: &ModelInputs) -> Result<Var, CunetError> {
        let v = cfg.variant;
        let (g, gp) = (cfg.g, cfg.padded_g());
        let v_pre = self.tape.constant(inputs.v_pre.clone());
        let v_pre = self.tape.pad_spatial(v_pre, gp, gp)?;

        let cond = if v.has_condition() {
            let sc = self.tape.constant(inputs.sc.clone());
            let sir = self.tape.constant(inputs.sir.clone());
            let c = condition_map_on_tape(self.tape, sc, sir, v)?.expect("conditioned variant");
            Some(self.tape.pad_spatial(c, gp, gp)?)
        } else {
            None
        };
        let film = if v.modulates() {
            let sir = self.tape.constant(inputs.sir.clone());
            Some(self.modulation(cfg, sir)?)
        } else {
            None
        };
        let site = |s: usize| film.as_ref().map(|f| f[s]);

        // condition pyramid, one level per resolution
        let pyramid = match cond {
            Some(c) => {
                let mut levels = Vec::with_capacity(DEPTH + 1);
                let z = self.conv(c, "cond.0", 1, 1)?;
                levels.push(self.tape.relu(z));
                for l in 1..=DEPTH {
                    let z = self.conv(levels[l - 1], &format!("cond.{l}"), 2, 1)?;
                    levels.push(self.tape.relu(z));
                }
                Some(levels)
            }
            None => None,
        };
        let level = |l: usize| pyramid.as_ref().map(|p| p[l]);

        let x = self.conv(v_pre, "stem.input", 1, 1)?;
        let mut x = match cond {
            Some(c) => {
                let xc = self.conv(c, "stem.cond", 1, 1)?;
                self.tape.concat_channels(xc, x)?
            }
            None => x,
        };

        let mut skips = Vec::with_capacity(DEPTH);
        let mut res = gp;
        for l in 0..DEPTH {
            let h = self.block(x, &format!("enc.{l}"), level(l), site(l))?;
            skips.push(h);
            res /= 2;
            x = self.tape.adaptive_avg_pool(h, res, res)?;
        }
        x = self.block(x, "bottleneck", level(DEPTH), site(DEPTH))?;
        for l in (0..DEPTH).rev() {
            let (w, b) = (self.p(&format!("dec.{l}.up.weight")), self.p(&format!("dec.{l}.up.bias")));
            let up = self.tape.conv_transpose2d(x, w, b, 2, 0)?;
            let cat = self.tape.concat_channels(up, skips[l])?;
            x = self.block(cat, &format!("dec.{l}"), level(l), site(DEPTH + 1 + (DEPTH - 1 - l)))?;
        }
        let logits = self.conv(x, "head", 1, 0)?;
        let logits = self.tape.crop_spatial(logits, g, g)?;
        let p = self.tape.sigmoid(logits);
        let eps = BCE_EPS as f32;
        Ok(self.tape.clamp(p, eps, 1.0 - eps))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Variant;
    use super::*;

    fn cfg(variant: Variant, g: usize) -> CUNetConfig {
        CUNetConfig {
            base_channels: 8,
            ..CUNetConfig::new(g, 4, variant)
        }
    }

    fn inputs(b: usize, g: usize, k: usize, salt: u32) -> ModelInputs {
        let wave = |i: usize| ((i as u32).wrapping_mul(2654435761).wrapping_add(salt) >> 16) as f32 / 65536.0;
        ModelInputs {
            v_pre: Tensor::new(&[b, 1, g, g], (0..b * g * g).map(|i| (wave(i) > 0.8) as u8 as f32).collect()).unwrap(),
            sc: Tensor::new(&[b, k, g, g], (0..b * k * g * g).map(|i| wave(i + 7)).collect()).unwrap(),
            sir: Tensor::new(&[b, k], (0..b * k).map(|i| wave(i + 3)).collect()).unwrap(),
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let a = CUNetModel::build(cfg(Variant::Full, 32)).unwrap();
        let b = CUNetModel::build(cfg(Variant::Full, 32)).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(a.count_parameters(), b.count_parameters());
    }

    #[test]
    fn baseline_has_no_condition_parameters() {
        let m = CUNetModel::build(cfg(Variant::Baseline, 32)).unwrap();
        assert!(m
            .parameters()
            .iter()
            .all(|p| !p.name.starts_with("cond.") && !p.name.starts_with("film.") && !p.name.contains("attn")));
    }

    #[test]
    fn parameter_counts_grow_along_the_ladder() {
        let n: Vec<usize> = Variant::ALL
            .iter()
            .map(|&v| CUNetModel::build(cfg(v, 32)).unwrap().count_parameters())
            .collect();
        // Full > Concat > Spatial > Baseline, and Full > Modulation > Spatial
        assert!(n[4] > n[2] && n[2] > n[1] && n[1] > n[0]);
        assert!(n[4] > n[3] && n[3] > n[1]);
    }

    #[test]
    fn output_shape_and_range() {
        for g in [16, 32, 20] {
            let m = CUNetModel::build(cfg(Variant::Full, g)).unwrap();
            let out = m.predict(&inputs(2, g, 4, 1)).unwrap();
            assert_eq!(out.shape(), &[2, 1, g, g]);
            assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn fresh_modulation_is_zero() {
        let m = CUNetModel::build(cfg(Variant::Full, 16)).unwrap();
        let pairs = m.modulation_params(&inputs(3, 16, 4, 2).sir).unwrap();
        assert_eq!(pairs.len(), 9);
        for ((g, b), w) in pairs.iter().zip(m.config().modulation_widths()) {
            assert_eq!(g.shape(), &[3, w]);
            assert!(g.data().iter().chain(b.data()).all(|&v| v == 0.0));
        }
        let base = CUNetModel::build(cfg(Variant::Baseline, 16)).unwrap();
        assert!(base.modulation_params(&inputs(1, 16, 4, 0).sir).is_err());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = CUNetModel::build(cfg(Variant::Spatial, 16)).unwrap();
        assert!(matches!(m.predict(&inputs(1, 32, 4, 0)), Err(CunetError::ShapeMismatch(_))));
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut m = CUNetModel::build(cfg(Variant::Spatial, 16)).unwrap();
        let before = m.batchnorm_stats().to_vec();
        let mut tape = Tape::new();
        m.forward_train(&mut tape, &inputs(2, 16, 4, 5)).unwrap();
        assert_ne!(m.batchnorm_stats(), &before[..]);
    }
}
