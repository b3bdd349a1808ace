//! FWL-MAE: tube-patch masked autoencoder with peak heads, plus the
//! classification head used after the encoder is frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal_tensor, xavier, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    /// Model input volume `(H, W, T)`; one inference tile.
    pub input: [usize; 3],
    pub patch: [usize; 3],
    pub d_enc: usize,
    pub d_dec: usize,
    pub blocks_enc: usize,
    pub blocks_dec: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    /// Peak slots per patch.
    pub k_peaks: usize,
    pub lambda_pos: f64,
    pub lambda_amp: f64,
    pub lambda_width: f64,
    pub dropout: f64,
    pub classes: usize,
    /// Multiplies raw histogram counts before they enter the model.
    pub input_scale: f64,
    /// Detection threshold for peak targets, in scaled units.
    pub peak_threshold: f64,
}

impl Default for MaeConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            input: [32, 32, 64],
            patch: [8, 8, 64],
            d_enc: 96,
            d_dec: 48,
            blocks_enc: 6,
            blocks_dec: 6,
            heads: 6,
            mlp_ratio: 4,
            mask_ratio: 0.7,
            k_peaks: 4,
            lambda_pos: 1.0,
            lambda_amp: 1.0,
            lambda_width: 0.5,
            dropout: 0.1,
            classes: 4,
            input_scale: 1.0,
            peak_threshold: 0.05,
        }
    }
}

impl MaeConfig {
    /// Full-size configuration with 128 x 128 x 256 tiles.
    pub fn full_scale() -> Self {
        Self {
            input: [128, 128, 256],
            patch: [16, 16, 256],
            d_enc: 768,
            d_dec: 384,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.input.iter().zip(&self.patch).any(|(i, p)| *p == 0 || i % p != 0) {
            return bad("input dims must be divisible by patch dims");
        }
        if self.heads == 0 || self.d_enc % self.heads != 0 || self.d_dec % self.heads != 0 {
            return bad("d_enc and d_dec must be divisible by heads");
        }
        if self.d_enc < 2 || self.d_dec == 0 || self.mlp_ratio == 0 {
            return bad("model widths must be positive");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie in (0, 1)");
        }
        if self.k_peaks == 0 || self.classes == 0 {
            return bad("k_peaks and classes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.input_scale > 0.0) {
            return bad("input_scale must be > 0");
        }
        Ok(())
    }

    pub fn grid(&self) -> [usize; 3] {
        [
            self.input[0] / self.patch[0],
            self.input[1] / self.patch[1],
            self.input[2] / self.patch[2],
        ]
    }

    pub fn n_patches(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct Layout {
    patch: (usize, usize),
    enc: Vec<Block>,
    enc_norm: (usize, usize),
    enc_to_dec: (usize, usize),
    mask_token: usize,
    dec: Vec<Block>,
    dec_norm: (usize, usize),
    recon: (usize, usize),
    pos: (usize, usize),
    amp: (usize, usize),
    width: (usize, usize),
    cls1: (usize, usize),
    cls2: (usize, usize),
}

/// Parameter-name prefixes of the classification head.
pub const HEAD_PREFIX: &str = "cls.";

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: MaeConfig,
    pub params: ParamStore,
    layout: Layout,
    pe_enc: Tensor,
    pe_dec: Tensor,
}

fn block_names(prefix: &str) -> Vec<(String, &'static str)> {
    ["ln1", "qkv", "proj", "ln2", "fc1", "fc2"]
        .iter()
        .map(|n| (format!("{prefix}.{n}"), *n))
        .collect()
}

/// Every parameter name with its shape, in store order.
fn param_shapes(cfg: &MaeConfig) -> Vec<(String, Vec<usize>)> {
    let (de, dd, p, k) = (cfg.d_enc, cfg.d_dec, cfg.patch_voxels(), cfg.k_peaks);
    let mut v: Vec<(String, Vec<usize>)> = vec![("patch.w".into(), vec![p, de]), ("patch.b".into(), vec![de])];
    let blocks = |v: &mut Vec<(String, Vec<usize>)>, prefix: &str, n: usize, d: usize| {
        for i in 0..n {
            for (name, kind) in block_names(&format!("{prefix}.{i}")) {
                let (w, b): (Vec<usize>, Vec<usize>) = match kind {
                    "ln1" | "ln2" => (vec![d], vec![d]),
                    "qkv" => (vec![d, 3 * d], vec![3 * d]),
                    "proj" => (vec![d, d], vec![d]),
                    "fc1" => (vec![d, cfg.mlp_ratio * d], vec![cfg.mlp_ratio * d]),
                    _ => (vec![cfg.mlp_ratio * d, d], vec![d]),
                };
                let (wn, bn) = if kind.starts_with("ln") { ("g", "b") } else { ("w", "b") };
                v.push((format!("{name}.{wn}"), w));
                v.push((format!("{name}.{bn}"), b));
            }
        }
    };
    blocks(&mut v, "enc", cfg.blocks_enc, de);
    v.push(("enc.norm.g".into(), vec![de]));
    v.push(("enc.norm.b".into(), vec![de]));
    v.push(("enc_to_dec.w".into(), vec![de, dd]));
    v.push(("enc_to_dec.b".into(), vec![dd]));
    v.push(("mask_token".into(), vec![dd]));
    blocks(&mut v, "dec", cfg.blocks_dec, dd);
    v.push(("dec.norm.g".into(), vec![dd]));
    v.push(("dec.norm.b".into(), vec![dd]));
    v.push(("recon.w".into(), vec![dd, p]));
    v.push(("recon.b".into(), vec![p]));
    for h in ["peak.pos", "peak.amp", "peak.width"] {
        v.push((format!("{h}.w"), vec![dd, k]));
        v.push((format!("{h}.b"), vec![k]));
    }
    v.push(("cls.fc1.w".into(), vec![de, de / 2]));
    v.push(("cls.fc1.b".into(), vec![de / 2]));
    v.push(("cls.fc2.w".into(), vec![de / 2, p * cfg.classes]));
    v.push(("cls.fc2.b".into(), vec![p * cfg.classes]));
    v
}

/// Fixed 1D sine-cosine table, one row per token.
pub fn sinusoidal_table(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            t.data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

impl Model {
    /// Fresh model: Glorot weights, zero biases, unit norms, small mask token.
    pub fn new(cfg: MaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&cfg) {
            let t = if name == "mask_token" {
                normal_tensor(&shape, 0.02, &mut rng)
            } else if name.ends_with(".g") {
                Tensor::filled(&shape, 1.0)
            } else if shape.len() == 2 {
                xavier(shape[0], shape[1], &mut rng)
            } else {
                Tensor::zeros(&shape)
            };
            params.add(name, t);
        }
        Self::from_params(cfg, params)
    }

    /// Wraps an existing store, checking every expected name and shape.
    pub fn from_params(cfg: MaeConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in param_shapes(&cfg) {
            let i = params
                .index_of(&name)
                .ok_or_else(|| NnError::Config(format!("missing parameter `{name}`")))?;
            if params.get(i).shape != shape {
                return Err(NnError::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(i).shape
                )));
            }
        }
        let ix = |n: &str| params.index_of(n).expect("checked above");
        let pair = |n: &str, a: &str, b: &str| (ix(&format!("{n}.{a}")), ix(&format!("{n}.{b}")));
        let block = |prefix: String| Block {
            ln1: pair(&format!("{prefix}.ln1"), "g", "b"),
            qkv: pair(&format!("{prefix}.qkv"), "w", "b"),
            proj: pair(&format!("{prefix}.proj"), "w", "b"),
            ln2: pair(&format!("{prefix}.ln2"), "g", "b"),
            fc1: pair(&format!("{prefix}.fc1"), "w", "b"),
            fc2: pair(&format!("{prefix}.fc2"), "w", "b"),
        };
        let layout = Layout {
            patch: pair("patch", "w", "b"),
            enc: (0..cfg.blocks_enc).map(|i| block(format!("enc.{i}"))).collect(),
            enc_norm: pair("enc.norm", "g", "b"),
            enc_to_dec: pair("enc_to_dec", "w", "b"),
            mask_token: ix("mask_token"),
            dec: (0..cfg.blocks_dec).map(|i| block(format!("dec.{i}"))).collect(),
            dec_norm: pair("dec.norm", "g", "b"),
            recon: pair("recon", "w", "b"),
            pos: pair("peak.pos", "w", "b"),
            amp: pair("peak.amp", "w", "b"),
            width: pair("peak.width", "w", "b"),
            cls1: pair("cls.fc1", "w", "b"),
            cls2: pair("cls.fc2", "w", "b"),
        };
        let n = cfg.n_patches();
        Ok(Self {
            pe_enc: sinusoidal_table(n, cfg.d_enc),
            pe_dec: sinusoidal_table(n, cfg.d_dec),
            cfg,
            params,
            layout,
        })
    }

    /// Indices of the classification-head parameters.
    pub fn head_params(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params.name(i).starts_with(HEAD_PREFIX))
            .collect()
    }

    /// Freezes everything but the classification head.
    pub fn freeze_all_but_head(&mut self) {
        for i in 0..self.params.len() {
            let head = self.params.name(i).starts_with(HEAD_PREFIX);
            self.params.set_frozen(i, !head);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for i in 0..self.params.len() {
            self.params.set_frozen(i, false);
        }
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(Some(&self.params))
    }

    fn lin(&self, g: &mut Graph, x: Var, (w, b): (usize, usize)) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph, x: Var, (gi, bi): (usize, usize)) -> Result<Var> {
        let (gv, bv) = (g.param(gi), g.param(bi));
        g.layer_norm(x, gv, bv)
    }

    /// Pre-norm transformer block.
    fn block(&self, g: &mut Graph, x: Var, b: &Block) -> Result<Var> {
        let h = self.norm(g, x, b.ln1)?;
        let qkv = self.lin(g, h, b.qkv)?;
        let a = g.attention(qkv, self.cfg.heads)?;
        let a = self.lin(g, a, b.proj)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, b.ln2)?;
        let h = self.lin(g, h, b.fc1)?;
        let h = g.gelu(h);
        let h = self.lin(g, h, b.fc2)?;
        g.add(x, h)
    }

    fn pe_rows(table: &Tensor, rows: &[usize]) -> Tensor {
        let d = table.shape[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(table.row(r));
        }
        Tensor {
            shape: vec![rows.len(), d],
            data,
        }
    }

    /// Token embeddings `[N, d_enc]` of a scaled input volume node.
    pub fn embed(&self, g: &mut Graph, volume: Var) -> Result<Var> {
        let tokens = g.patchify(volume, self.cfg.patch)?;
        self.lin(g, tokens, self.layout.patch)
    }

    /// Encoder over the given token rows (`tokens` already gathered to them).
    pub fn encode(&self, g: &mut Graph, tokens: Var, rows: &[usize]) -> Result<Var> {
        let pe = g.input(Self::pe_rows(&self.pe_enc, rows), false);
        let mut x = g.add(tokens, pe)?;
        for b in &self.layout.enc {
            x = self.block(g, x, b)?;
        }
        self.norm(g, x, self.layout.enc_norm)
    }

    /// Projects visible features, inserts mask tokens and adds decoder PE.
    pub fn assemble_decoder_tokens(&self, g: &mut Graph, features: Var, visible: &[usize], masked: &[usize]) -> Result<Var> {
        let n = self.cfg.n_patches();
        if visible.len() + masked.len() != n {
            return Err(NnError::Index(format!(
                "{} visible + {} masked tokens for {n} patches",
                visible.len(),
                masked.len()
            )));
        }
        let mut slots = vec![None; n];
        for (k, &i) in visible.iter().enumerate() {
            if i >= n || slots[i].is_some() {
                return Err(NnError::Index(format!("visible token {i} out of range or repeated")));
            }
            slots[i] = Some(k);
        }
        for &i in masked {
            if i >= n || slots[i].is_some() || visible.contains(&i) {
                return Err(NnError::Index(format!("masked token {i} overlaps or is out of range")));
            }
        }
        let proj = self.lin(g, features, self.layout.enc_to_dec)?;
        let token = g.param(self.layout.mask_token);
        let x = g.assemble(proj, token, &slots)?;
        let pe = g.input(self.pe_dec.clone(), false);
        g.add(x, pe)
    }

    /// `(positions, amplitudes, widths)`, each `[N, K]`.
    pub fn peak_heads(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Var, Var)> {
        let tp = self.cfg.patch[2];
        let p = self.lin(g, tokens, self.layout.pos)?;
        let p = g.sigmoid(p);
        let p = g.scale(p, (tp - 1) as f64);
        let a = self.lin(g, tokens, self.layout.amp)?;
        let a = g.softplus(a);
        let w = self.lin(g, tokens, self.layout.width)?;
        let w = g.softplus(w);
        Ok((p, a, w))
    }

    /// Decoder blocks, final norm and voxel reconstruction of `rows`.
    pub fn decode_reconstruct(&self, g: &mut Graph, tokens: Var, rows: &[usize]) -> Result<Var> {
        let mut x = tokens;
        for b in &self.layout.dec {
            x = self.block(g, x, b)?;
        }
        let x = self.norm(g, x, self.layout.dec_norm)?;
        let x = g.gather_rows(x, rows)?;
        self.lin(g, x, self.layout.recon)
    }

    /// Per-voxel class probabilities `[N, P * C]` from encoder features.
    ///
    /// `dropout_mask`, when given, multiplies the hidden layer.
    pub fn classify_head(&self, g: &mut Graph, features: Var, dropout_mask: Option<Vec<f64>>) -> Result<Var> {
        let h = self.lin(g, features, self.layout.cls1)?;
        let h = g.relu(h);
        let h = match dropout_mask {
            Some(m) => g.dropout(h, m)?,
            None => h,
        };
        let logits = self.lin(g, h, self.layout.cls2)?;
        g.softmax_groups(logits, self.cfg.classes)
    }

    /// Encoder features of every patch of a scaled input volume, without gradients.
    pub fn features(&self, volume: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Some(&self.params));
        let all: Vec<usize> = (0..self.cfg.n_patches()).collect();
        let v = g.input(volume.clone(), false);
        let tok = self.embed(&mut g, v)?;
        let f = self.encode(&mut g, tok, &all)?;
        Ok(g.value(f).clone())
    }

    /// Class probabilities of every voxel, `[N, P * C]`, in inference mode.
    pub fn predict_probs(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Some(&self.params));
        let f = g.input(features.clone(), false);
        let p = self.classify_head(&mut g, f, None)?;
        Ok(g.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MaeConfig {
        MaeConfig {
            input: [4, 4, 6],
            patch: [2, 2, 6],
            d_enc: 6,
            d_dec: 4,
            blocks_enc: 1,
            blocks_dec: 1,
            heads: 2,
            ..MaeConfig::default()
        }
    }

    #[test]
    fn parameter_table_is_complete() {
        let m = Model::new(tiny(), 1).unwrap();
        let expected: usize = param_shapes(&tiny()).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(m.params.count(), expected);
        assert_eq!(m.head_params().len(), 4);
        let mut p = m.params.clone();
        let i = p.index_of("recon.b").unwrap();
        p.get_mut(i).shape = vec![3];
        assert!(Model::from_params(tiny(), p).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MaeConfig { d_enc: 97, ..MaeConfig::default() }.validate().is_err());
        assert!(MaeConfig { mask_ratio: 1.0, ..MaeConfig::default() }.validate().is_err());
        assert!(MaeConfig { input: [30, 32, 64], ..MaeConfig::default() }.validate().is_err());
        assert_eq!(MaeConfig::default().n_patches(), 16);
        let full = MaeConfig::full_scale();
        assert_eq!(full.n_patches(), 64);
        assert_eq!(full.patch_voxels() * full.classes, 16 * 16 * 256 * 4);
    }
}
