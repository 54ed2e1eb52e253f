//! The conditional denoiser: a transformer encoder over observed features and
//! a query-based decoder that maps noisy future latents to clean estimates.

use std::fmt;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::DiffRng;
use crate::tensor::Matrix;

/// Encoder self-attention pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionMaskSpec {
    Global,
    /// One odd window size per encoder layer, nondecreasing with depth. Layers
    /// beyond the list reuse the last window.
    Local(Vec<usize>),
}

impl AttentionMaskSpec {
    /// Window sizes of the hierarchical local mask.
    pub fn hierarchical() -> Self {
        AttentionMaskSpec::Local(vec![9, 33, 129, 513])
    }

    pub fn validate(&self) -> Result<()> {
        if let AttentionMaskSpec::Local(w) = self {
            if w.is_empty() {
                return Err(Error::config(
                    "model.mask_windows",
                    "local mask needs windows",
                ));
            }
            if let Some(bad) = w.iter().find(|&&x| x % 2 == 0) {
                return Err(Error::config(
                    "model.mask_windows",
                    format!("window {bad} is not odd"),
                ));
            }
            if w.windows(2).any(|p| p[1] < p[0]) {
                return Err(Error::config(
                    "model.mask_windows",
                    "windows must be nondecreasing with depth",
                ));
            }
        }
        Ok(())
    }

    /// Row-major `len x len` allowed-pattern for `layer`, or `None` when
    /// attention is unrestricted.
    pub fn allowed(&self, layer: usize, len: usize) -> Option<Vec<bool>> {
        match self {
            AttentionMaskSpec::Global => None,
            AttentionMaskSpec::Local(w) => {
                let half = w[layer.min(w.len() - 1)] / 2;
                let mut out = vec![false; len * len];
                for i in 0..len {
                    for j in i.saturating_sub(half)..(i + half + 1).min(len) {
                        out[i * len + j] = true;
                    }
                }
                Some(out)
            }
        }
    }
}

impl fmt::Display for AttentionMaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionMaskSpec::Global => f.write_str("global"),
            AttentionMaskSpec::Local(_) => f.write_str("local"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Feature dimension K of the observed frames.
    pub input_dim: usize,
    /// Encoder width D.
    pub hidden_dim: usize,
    /// Decoder width D'.
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Number of action queries M.
    pub queries: usize,
    /// Classes C, EOS included.
    pub num_classes: usize,
    pub mask: AttentionMaskSpec,
    /// Total diffusion steps S (upper bound for step embeddings).
    pub total_steps: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.input_dim", self.input_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.latent_dim", self.latent_dim),
            ("model.encoder_layers", self.encoder_layers),
            ("model.decoder_layers", self.decoder_layers),
            ("model.heads", self.heads),
            ("model.ffn_mult", self.ffn_mult),
            ("model.queries", self.queries),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.hidden_dim % self.heads != 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!(
                    "{} heads do not divide widths {} and {}",
                    self.heads, self.hidden_dim, self.latent_dim
                ),
            ));
        }
        if self.latent_dim < 2 || self.hidden_dim < 2 {
            return Err(Error::config(
                "model.latent_dim",
                "widths must be at least 2",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        self.mask.validate()
    }
}

/// `L x K` observed features, optionally with per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedFeatures {
    pub features: Matrix,
    pub frame_labels: Option<Vec<usize>>,
}

impl ObservedFeatures {
    pub fn new(features: Matrix, frame_labels: Option<Vec<usize>>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidRange("observation has no frames".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                what: "observed features".into(),
                diagnostics: format!("{:?}", features.shape()),
            });
        }
        if let Some(l) = &frame_labels {
            if l.len() != features.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} frames",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self {
            features,
            frame_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Encoder output: `E` (`L x D`) and per-frame class logits (`L x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedObservation {
    pub e: Matrix,
    pub frame_logits: Matrix,
}

/// `[sin(p·ω_0), cos(p·ω_0), sin(p·ω_1), ...]` with `ω_i = 10000^(-2i/dim)`.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = j / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            if j % 2 == 0 {
                (position * freq).sin()
            } else {
                (position * freq).cos()
            }
        })
        .collect()
}

pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..len).map(|p| sinusoid(p as f64, dim)).collect();
    Matrix::from_rows(&rows).expect("positional encoding shape")
}

/// Forward-pass switches.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Enables dropout when set (training).
    pub rng: Option<&'a mut DiffRng>,
    /// Test hook: replace cross-attention values with zeros.
    pub zero_cross_values: bool,
}

impl ForwardOptions<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let n = g.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
                g.dropout(x, &keep, p)
            }
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    fn project_kv(&self, store: &ParamStore, g: &mut Graph, src: Var) -> (Var, Var) {
        (self.k.forward(store, g, src), self.v.forward(store, g, src))
    }

    fn attend(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: Var,
        k: Var,
        v: Var,
        allowed: Option<&[bool]>,
        weights: Option<&mut Vec<Var>>,
    ) -> Var {
        let q = self.q.forward(store, g, x);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut recorded = Vec::new();
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores, allowed);
            recorded.push(p);
            outs.push(g.matmul(p, vh));
        }
        if let Some(w) = weights {
            w.extend(recorded);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.o.forward(store, g, merged)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        mult: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, dim * mult, rng),
            down: Linear::new(store, &format!("{name}.down"), dim * mult, dim, rng),
        }
    }

    fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(store, g, x);
        let h = g.relu(h);
        self.down.forward(store, g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

/// Cross-attention keys and values for every decoder layer, computed once per
/// observation.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    layers: Vec<(Matrix, Matrix)>,
}

/// Parameter handles of the denoiser network.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetConfig,
    in_proj: Linear,
    encoder: Vec<EncoderLayer>,
    frame_head: Linear,
    memory_proj: Option<Linear>,
    queries: ParamId,
    step_mlp: (Linear, Linear),
    decoder: Vec<DecoderLayer>,
    out_proj: Linear,
}

impl Network {
    pub fn new(store: &mut ParamStore, config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let dl = config.latent_dim;
        let in_proj = Linear::new(store, "enc.in_proj", config.input_dim, d, rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("enc.{i}");
                EncoderLayer {
                    attn: Attention::new(store, &format!("{n}.attn"), d, config.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, config.ffn_mult, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let frame_head = Linear::new(store, "enc.frame_head", d, config.num_classes, rng);
        let memory_proj = (d != dl).then(|| Linear::new(store, "dec.memory_proj", d, dl, rng));
        let queries = store.add("dec.queries", normal(config.queries, dl, 0.02, rng));
        let step_mlp = (
            Linear::new(store, "dec.step_mlp.0", dl, dl, rng),
            Linear::new(store, "dec.step_mlp.1", dl, dl, rng),
        );
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("dec.{i}");
                DecoderLayer {
                    self_attn: Attention::new(
                        store,
                        &format!("{n}.self_attn"),
                        dl,
                        config.heads,
                        rng,
                    ),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), dl),
                    cross_attn: Attention::new(
                        store,
                        &format!("{n}.cross_attn"),
                        dl,
                        config.heads,
                        rng,
                    ),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), dl),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), dl, config.ffn_mult, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), dl),
                }
            })
            .collect();
        let out_proj = Linear::new(store, "dec.out_proj", dl, dl, rng);
        Ok(Self {
            config,
            in_proj,
            encoder,
            frame_head,
            memory_proj,
            queries,
            step_mlp,
            decoder,
            out_proj,
        })
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    fn check_features(&self, f: &Matrix) -> Result<()> {
        if f.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features have {} dims, model expects {}",
                f.cols(),
                self.config.input_dim
            )));
        }
        if f.rows() == 0 {
            return Err(Error::InvalidRange("observation has no frames".into()));
        }
        Ok(())
    }

    /// Encoder on the tape: returns `(E, frame_logits)`. When `attn_weights`
    /// is given, every head's attention matrix is appended layer by layer.
    pub fn encode_graph(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        features: &Matrix,
        opts: &mut ForwardOptions<'_>,
        mut attn_weights: Option<&mut Vec<Var>>,
    ) -> Result<(Var, Var)> {
        self.check_features(features)?;
        let len = features.rows();
        let p = self.config.dropout;
        let f = g.input(features.clone());
        let x = self.in_proj.forward(store, g, f);
        let pos = g.input(positional_encoding(len, self.config.hidden_dim));
        let mut x = g.add(x, pos);
        for (i, layer) in self.encoder.iter().enumerate() {
            let allowed = self.config.mask.allowed(i, len);
            let (k, v) = layer.attn.project_kv(store, g, x);
            let a = layer.attn.attend(
                store,
                g,
                x,
                k,
                v,
                allowed.as_deref(),
                attn_weights.as_deref_mut(),
            );
            let a = opts.dropout(g, a, p);
            let h = g.add(x, a);
            let h = layer.norm1.forward(store, g, h);
            let ff = layer.ffn.forward(store, g, h);
            let ff = opts.dropout(g, ff, p);
            let h2 = g.add(h, ff);
            x = layer.norm2.forward(store, g, h2);
        }
        let logits = self.frame_head.forward(store, g, x);
        Ok((x, logits))
    }

    pub fn encode(&self, store: &ParamStore, obs: &ObservedFeatures) -> Result<EncodedObservation> {
        let mut g = Graph::new();
        let (e, logits) = self.encode_graph(
            store,
            &mut g,
            &obs.features,
            &mut ForwardOptions::default(),
            None,
        )?;
        Ok(EncodedObservation {
            e: g.value(e).clone(),
            frame_logits: g.value(logits).clone(),
        })
    }

    /// Attention matrices of every encoder layer, `[layer][head]`.
    pub fn encoder_attention(
        &self,
        store: &ParamStore,
        features: &Matrix,
    ) -> Result<Vec<Vec<Matrix>>> {
        let mut g = Graph::new();
        let mut weights = Vec::new();
        self.encode_graph(
            store,
            &mut g,
            features,
            &mut ForwardOptions::default(),
            Some(&mut weights),
        )?;
        Ok(weights
            .chunks(self.config.heads)
            .map(|layer| layer.iter().map(|&v| g.value(v).clone()).collect())
            .collect())
    }

    /// Sinusoidal base of the step embedding, before the MLP.
    pub fn step_base(&self, s: usize) -> Result<Vec<f64>> {
        if s > self.config.total_steps {
            return Err(Error::StepOutOfRange {
                step: s,
                lo: 0,
                hi: self.config.total_steps,
            });
        }
        Ok(sinusoid(s as f64, self.config.latent_dim))
    }

    pub fn step_embed_graph(&self, store: &ParamStore, g: &mut Graph, s: usize) -> Result<Var> {
        let base = g.input(Matrix::row_vector(&self.step_base(s)?));
        let h = self.step_mlp.0.forward(store, g, base);
        let h = g.relu(h);
        Ok(self.step_mlp.1.forward(store, g, h))
    }

    pub fn step_embed(&self, store: &ParamStore, s: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.step_embed_graph(store, &mut g, s)?;
        Ok(g.value(v).as_slice().to_vec())
    }

    /// Per-layer cross-attention keys/values on the tape.
    pub fn memory_graph(&self, store: &ParamStore, g: &mut Graph, e: Var) -> Vec<(Var, Var)> {
        let mem = match &self.memory_proj {
            Some(p) => p.forward(store, g, e),
            None => e,
        };
        self.decoder
            .iter()
            .map(|layer| layer.cross_attn.project_kv(store, g, mem))
            .collect()
    }

    pub fn memory(&self, store: &ParamStore, enc: &EncodedObservation) -> Result<DecoderMemory> {
        if enc.e.cols() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "encoding has width {}, expected {}",
                enc.e.cols(),
                self.config.hidden_dim
            )));
        }
        let mut g = Graph::new();
        let e = g.input(enc.e.clone());
        let kv = self.memory_graph(store, &mut g, e);
        Ok(DecoderMemory {
            layers: kv
                .into_iter()
                .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect(),
        })
    }

    /// Decoder on the tape: `ẑ0 = f(z_s, s, E)`.
    pub fn denoise_graph(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        z_s: Var,
        s: usize,
        memory: &[(Var, Var)],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        let (m, dim) = g.shape(z_s);
        if m != self.config.queries || dim != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent is {m}x{dim}, decoder expects {}x{}",
                self.config.queries, self.config.latent_dim
            )));
        }
        let p = self.config.dropout;
        let q = store.bind(g, self.queries);
        let step = self.step_embed_graph(store, g, s)?;
        let x = g.add(z_s, q);
        let mut x = g.add_row(x, step);
        for (layer, &(k, v)) in self.decoder.iter().zip(memory) {
            let (sk, sv) = layer.self_attn.project_kv(store, g, x);
            let a = layer.self_attn.attend(store, g, x, sk, sv, None, None);
            let a = opts.dropout(g, a, p);
            let h = g.add(x, a);
            let h = layer.norm1.forward(store, g, h);

            let v = if opts.zero_cross_values {
                let shape = g.shape(v);
                g.input(Matrix::zeros(shape.0, shape.1))
            } else {
                v
            };
            let c = layer.cross_attn.attend(store, g, h, k, v, None, None);
            let c = opts.dropout(g, c, p);
            let h2 = g.add(h, c);
            let h2 = layer.norm2.forward(store, g, h2);

            let ff = layer.ffn.forward(store, g, h2);
            let ff = opts.dropout(g, ff, p);
            let h3 = g.add(h2, ff);
            x = layer.norm3.forward(store, g, h3);
        }
        Ok(self.out_proj.forward(store, g, x))
    }

    /// Inference-time denoising step against a precomputed memory.
    pub fn denoise(
        &self,
        store: &ParamStore,
        z_s: &Matrix,
        s: usize,
        memory: &DecoderMemory,
        zero_cross_values: bool,
    ) -> Result<Matrix> {
        let mut g = Graph::new();
        let z = g.input(z_s.clone());
        let mem: Vec<(Var, Var)> = memory
            .layers
            .iter()
            .map(|(k, v)| (g.input(k.clone()), g.input(v.clone())))
            .collect();
        let mut opts = ForwardOptions {
            rng: None,
            zero_cross_values,
        };
        let out = self.denoise_graph(store, &mut g, z, s, &mem, &mut opts)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn tiny_config() -> NetConfig {
        NetConfig {
            input_dim: 5,
            hidden_dim: 8,
            latent_dim: 6,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            queries: 3,
            num_classes: 4,
            mask: AttentionMaskSpec::Global,
            total_steps: 100,
        }
    }

    fn build(config: NetConfig) -> (ParamStore, Network) {
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, config, &mut rng::seeded(7)).unwrap();
        (store, net)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.mask = AttentionMaskSpec::Local(vec![9, 8]);
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.mask = AttentionMaskSpec::Local(vec![33, 9]);
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.mask = AttentionMaskSpec::hierarchical();
        c.validate().unwrap();
    }

    #[test]
    fn single_frame_attention_is_identity_weighted() {
        let (store, net) = build(tiny_config());
        let f = Matrix::filled(1, 5, 0.3);
        let enc = net
            .encode(&store, &ObservedFeatures::new(f.clone(), None).unwrap())
            .unwrap();
        assert_eq!(enc.e.shape(), (1, 8));
        assert_eq!(enc.frame_logits.shape(), (1, 4));
        for layer in net.encoder_attention(&store, &f).unwrap() {
            for head in layer {
                assert_eq!(head.as_slice(), &[1.0]);
            }
        }
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let (store, net) = build(tiny_config());
        let mut r = rng::seeded(1);
        let f = rng::gaussian(&mut r, 12, 5);
        let mut swapped = f.clone();
        let (a, b) = (f.row(1).to_vec(), f.row(10).to_vec());
        swapped.row_mut(1).copy_from_slice(&b);
        swapped.row_mut(10).copy_from_slice(&a);
        let e1 = net
            .encode(&store, &ObservedFeatures::new(f, None).unwrap())
            .unwrap();
        let e2 = net
            .encode(&store, &ObservedFeatures::new(swapped, None).unwrap())
            .unwrap();
        // Rows 1 and 10 swap places; a permutation-invariant encoder would
        // produce exactly swapped outputs.
        let diff: f64 = (0..8)
            .map(|j| (e1.e.get(1, j) - e2.e.get(10, j)).abs())
            .sum();
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn local_windows_suppress_distant_frames() {
        let mut c = tiny_config();
        c.encoder_layers = 4;
        c.mask = AttentionMaskSpec::hierarchical();
        let (store, net) = build(c);
        let len = 40;
        let f = rng::gaussian(&mut rng::seeded(2), len, 5);
        let layers = net.encoder_attention(&store, &f).unwrap();
        for (l, (heads, window)) in layers.iter().zip([9usize, 33, 129, 513]).enumerate() {
            let half = window / 2;
            for w in heads {
                for i in 0..len {
                    for j in 0..len {
                        if i.abs_diff(j) > half {
                            assert!(
                                w.get(i, j) <= 1e-8,
                                "layer {l}: ({i},{j}) = {}",
                                w.get(i, j)
                            );
                        }
                    }
                }
            }
        }
        // Layer 0 window 9 really restricts: frame 0 spreads over 5 frames only.
        assert!(layers[0][0].row(0)[..5].iter().sum::<f64>() > 1.0 - 1e-9);
    }

    #[test]
    fn step_embedding_base() {
        let (store, net) = build(tiny_config());
        assert_eq!(
            net.step_base(0).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
        assert_eq!(
            net.step_embed(&store, 17).unwrap(),
            net.step_embed(&store, 17).unwrap()
        );
        assert!(net.step_base(101).is_err());
        // Adjacent steps: each pair rotates by the frequency ω_i.
        let dim = 6;
        let (a, b) = (net.step_base(41).unwrap(), net.step_base(42).unwrap());
        for i in 0..dim / 2 {
            let w = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let (s, c) = (a[2 * i], a[2 * i + 1]);
            let expect_sin = s * w.cos() + c * w.sin();
            let expect_cos = c * w.cos() - s * w.sin();
            assert!((b[2 * i] - expect_sin).abs() < 1e-12);
            assert!((b[2 * i + 1] - expect_cos).abs() < 1e-12);
        }
    }

    #[test]
    fn denoise_shapes_and_step_conditioning() {
        for m in [1, 8, 16] {
            let mut c = tiny_config();
            c.queries = m;
            let (store, net) = build(c);
            let f = rng::gaussian(&mut rng::seeded(3), 7, 5);
            let enc = net
                .encode(&store, &ObservedFeatures::new(f, None).unwrap())
                .unwrap();
            let mem = net.memory(&store, &enc).unwrap();
            let z = rng::gaussian(&mut rng::seeded(4), m, 6);
            let a = net.denoise(&store, &z, 10, &mem, false).unwrap();
            assert_eq!(a.shape(), (m, 6));
            assert_eq!(a, net.denoise(&store, &z, 10, &mem, false).unwrap());
            let b = net.denoise(&store, &z, 90, &mem, false).unwrap();
            assert!(a.zip_map(&b, |x, y| (x - y).abs()).sum() > 1e-6);
            assert!(net
                .denoise(&store, &Matrix::zeros(m + 1, 6), 10, &mem, false)
                .is_err());
        }
    }

    #[test]
    fn encoder_rejects_wrong_feature_width() {
        let (store, net) = build(tiny_config());
        let obs = ObservedFeatures::new(Matrix::zeros(3, 4), None).unwrap();
        assert!(net.encode(&store, &obs).is_err());
    }
}
