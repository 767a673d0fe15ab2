//! Ego-subtree aggregation and the key/query box decoders.
//!
//! Aggregation is one multi-head graph-attention layer in which a subtree's
//! root attends over its sampled children (and itself, when a self-loop is
//! present), then a residual with the root's own embedding and one linear
//! layer. Each decoder is two highway layers and a projection to a center
//! and a softplus offset.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::boxes::BoxEmbedding;
use crate::error::{Error, Result};
use crate::taxonomy::EgoSubtree;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_box: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_children: usize,
    /// When false, the key decoder reads the raw root embedding.
    pub use_aggregation: bool,
}

impl EncoderConfig {
    pub fn new(d_in: usize, d_box: usize) -> Self {
        EncoderConfig {
            d_in,
            d_box,
            n_heads: 4,
            dropout: 0.1,
            max_children: 30,
            use_aggregation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_box == 0 {
            return Err(Error::invalid("d_in and d_box must be positive"));
        }
        if self.n_heads == 0 || !self.d_in.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "n_heads = {} must divide d_in = {}",
                self.n_heads, self.d_in
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_children == 0 {
            return Err(Error::invalid("max_children must be at least 1"));
        }
        Ok(())
    }
}

/// Box corners on a tape, each `[rows, d_box]`.
#[derive(Debug, Clone, Copy)]
pub struct BoxVars {
    pub min: Var,
    pub max: Var,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.add(&format!("{name}.weight"), xavier(fan_in, fan_out, rng))?,
            b: store.add(&format!("{name}.bias"), Tensor::full(&[1, fan_out], bias))?,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
struct Highway {
    h: Linear,
    gate: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Decoder {
    layers: [Highway; 2],
    proj: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_box: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layer = |i: usize, rng: &mut _| -> Result<Highway> {
            Ok(Highway {
                h: Linear::new(store, &format!("{name}.hw{i}.h"), d_in, d_in, 0.0, rng)?,
                gate: Linear::new(store, &format!("{name}.hw{i}.gate"), d_in, d_in, -1.0, rng)?,
            })
        };
        let layers = [layer(0, rng)?, layer(1, rng)?];
        let proj = Linear::new(store, &format!("{name}.proj"), d_in, 2 * d_box, 0.0, rng)?;
        Ok(Decoder { layers, proj })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, d_box: usize) -> Result<BoxVars> {
        let mut y = x;
        for hw in &self.layers {
            let h = hw.h.forward(tape, p, y)?;
            let h = tape.relu(h);
            let t = hw.gate.forward(tape, p, y)?;
            let t = tape.sigmoid(t);
            // t * h + (1 - t) * y  ==  y + t * (h - y)
            let diff = tape.sub(h, y)?;
            let carry = tape.mul(t, diff)?;
            y = tape.add(y, carry)?;
        }
        let out = self.proj.forward(tape, p, y)?;
        let center = tape.slice(out, 1, 0, d_box)?;
        let offset = tape.slice(out, 1, d_box, 2 * d_box)?;
        let extent = tape.softplus(offset);
        let half = tape.scale(extent, 0.5);
        Ok(BoxVars {
            min: tape.sub(center, half)?,
            max: tape.add(center, half)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    gat_weight: ParamId,
    att_src: ParamId,
    att_dst: ParamId,
    gat_bias: ParamId,
    agg: Linear,
    key: Decoder,
    query: Decoder,
    /// `[d_in, n_heads]` indicator of which head owns each feature column.
    head_of: Tensor,
}

impl Encoder {
    /// Registers every parameter in `store` with seeded Xavier weights, zero
    /// biases and highway gate biases of -1.
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_in;
        let dh = d / cfg.n_heads;
        let gat_weight = store.add("gat.weight", xavier(d, d, rng))?;
        let att_src = store.add("gat.att_src", xavier(1, d, rng))?;
        let att_dst = store.add("gat.att_dst", xavier(1, d, rng))?;
        let gat_bias = store.add("gat.bias", Tensor::zeros(&[1, d]))?;
        let agg = Linear::new(store, "agg", d, d, 0.0, rng)?;
        let key = Decoder::new(store, "key", d, cfg.d_box, rng)?;
        let query = Decoder::new(store, "query", d, cfg.d_box, rng)?;
        let mut head_of = Tensor::zeros(&[d, cfg.n_heads]);
        for j in 0..d {
            head_of.data_mut()[j * cfg.n_heads + j / dh] = 1.0;
        }
        Ok(Encoder {
            cfg,
            gat_weight,
            att_src,
            att_dst,
            gat_bias,
            agg,
            key,
            query,
            head_of,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Aggregated features `[subtrees.len(), d_in]` for each ego-subtree.
    /// `embeddings` is the `[nodes, d_in]` table the subtrees index into.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        embeddings: Var,
        subtrees: &[EgoSubtree],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let shape = tape.value(embeddings).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d_in {
            return Err(Error::invalid(format!(
                "aggregate: embeddings must be [n, {}], got {shape:?}",
                self.cfg.d_in
            )));
        }
        let n_rows = shape[0];
        let mut local = BTreeMap::new();
        for s in subtrees {
            for &n in std::iter::once(&s.root).chain(&s.children) {
                if n >= n_rows {
                    return Err(Error::data(format!("aggregate: no embedding for node index {n}")));
                }
                local.insert(n, 0);
            }
        }
        for (i, v) in local.values_mut().enumerate() {
            *v = i;
        }
        let used: Vec<usize> = local.keys().copied().collect();
        let roots: Vec<usize> = subtrees.iter().map(|s| local[&s.root]).collect();
        let x = tape.gather_rows(embeddings, Rc::new(used))?;
        let x_root = tape.gather_rows(x, Rc::new(roots.clone()))?;
        if !self.cfg.use_aggregation {
            return Ok(x_root);
        }

        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut segments = Vec::with_capacity(subtrees.len());
        for (s, &r) in subtrees.iter().zip(&roots) {
            let start = src.len();
            src.extend(s.children.iter().map(|c| local[c]));
            if s.has_self_loop {
                src.push(r);
            }
            dst.resize(src.len(), r);
            if src.len() == start {
                return Err(Error::invalid("aggregate: subtree with no children and no self-loop"));
            }
            segments.push(start..src.len());
        }
        let segments = Rc::new(segments);
        let (src, dst) = (Rc::new(src), Rc::new(dst));

        let h = tape.matmul(x, p.var(self.gat_weight))?;
        let head_of = tape.constant(self.head_of.clone());
        let score = |tape: &mut Tape, att: ParamId| -> Result<Var> {
            let scaled = tape.mul(h, p.var(att))?;
            tape.matmul(scaled, head_of)
        };
        let s_src = score(tape, self.att_src)?;
        let s_dst = score(tape, self.att_dst)?;
        let e_src = tape.gather_rows(s_src, src.clone())?;
        let e_dst = tape.gather_rows(s_dst, dst)?;
        let e = tape.add(e_src, e_dst)?;
        let e = tape.leaky_relu(e, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(e, segments.clone())?;
        let alpha = tape.dropout(alpha, self.cfg.dropout, train, rng)?;

        let head_t = tape.constant(transpose(&self.head_of));
        let alpha_cols = tape.matmul(alpha, head_t)?;
        let h_src = tape.gather_rows(h, src)?;
        let msg = tape.mul(alpha_cols, h_src)?;
        let gat = tape.segment_sum(msg, segments)?;
        let gat = tape.add(gat, p.var(self.gat_bias))?;
        let residual = tape.add(gat, x_root)?;
        self.agg.forward(tape, p, residual)
    }

    /// Boxes for aggregated candidate features `[rows, d_in]`.
    pub fn decode_key(&self, tape: &mut Tape, p: &Bound, f: Var) -> Result<BoxVars> {
        self.check_width("decode_key", tape, f)?;
        self.key.forward(tape, p, f, self.cfg.d_box)
    }

    /// Boxes for raw query embeddings `[rows, d_in]`.
    pub fn decode_query(&self, tape: &mut Tape, p: &Bound, q: Var) -> Result<BoxVars> {
        self.check_width("decode_query", tape, q)?;
        self.query.forward(tape, p, q, self.cfg.d_box)
    }

    /// Query box for one embedding, evaluated without gradient tracking.
    pub fn query_box(&self, store: &ParamStore, q: &[f64]) -> Result<BoxEmbedding> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::row(q.to_vec()));
        let b = self.decode_query(&mut tape, &p, x)?;
        BoxEmbedding::new(tape.value(b.min).data().to_vec(), tape.value(b.max).data().to_vec())
    }

    fn check_width(&self, op: &str, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.cfg.d_in {
            return Err(Error::invalid(format!(
                "{op}: input must be [rows, {}], got {shape:?}",
                self.cfg.d_in
            )));
        }
        Ok(())
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().expect("matrix");
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("shape matches data")
}
