//! Encoder-only Transformer with quantile and discrete-hazard heads.
//!
//! Input: `context x 2F` (normalized features with invalid cells zeroed,
//! followed by the F mask channels). Pre-norm blocks, sinusoidal positions,
//! and a pooled summary (mean + last token) concatenated with the category
//! embedding feed one linear head per output.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use super::ModelConfig;
use crate::domain::Category;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputLayout {
    pub targets: usize,
    pub horizon: usize,
    pub quantiles: usize,
}

impl OutputLayout {
    pub fn per_target(&self) -> usize {
        self.horizon * self.quantiles + self.horizon
    }

    pub fn total(&self) -> usize {
        self.targets * self.per_target()
    }

    pub fn quantile(&self, t: usize, k: usize, q: usize) -> usize {
        t * self.per_target() + k * self.quantiles + q
    }

    pub fn hazard(&self, t: usize, k: usize) -> usize {
        t * self.per_target() + self.horizon * self.quantiles + k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    w_in: usize,
    b_in: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    cat_emb: usize,
    w_head: usize,
    b_head: usize,
}

/// Parameter tensors plus the wiring that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_width: usize,
    pub context: usize,
    pub width: usize,
    pub heads: usize,
    pub output: OutputLayout,
    pub names: Vec<String>,
    pub params: Vec<Mat>,
    layout: Layout,
    positions: Mat,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.names.len() - 1
    }
}

fn sinusoidal(context: usize, width: usize) -> Mat {
    let mut m = Mat::zeros(context, width);
    for pos in 0..context {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            m.data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

impl Network {
    /// Shapes only; weights are zero until [`Network::init`] or a load.
    pub fn new(config: &ModelConfig, feature_width: usize) -> Self {
        let d = config.width;
        let input_width = 2 * feature_width;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let w_in = b.add("input.w".into(), input_width, d);
        let b_in = b.add("input.b".into(), 1, d);
        let blocks = (0..config.depth)
            .map(|l| BlockIdx {
                ln1_g: b.add(format!("block{l}.ln1.g"), 1, d),
                ln1_b: b.add(format!("block{l}.ln1.b"), 1, d),
                wq: b.add(format!("block{l}.attn.wq"), d, d),
                bq: b.add(format!("block{l}.attn.bq"), 1, d),
                wk: b.add(format!("block{l}.attn.wk"), d, d),
                bk: b.add(format!("block{l}.attn.bk"), 1, d),
                wv: b.add(format!("block{l}.attn.wv"), d, d),
                bv: b.add(format!("block{l}.attn.bv"), 1, d),
                wo: b.add(format!("block{l}.attn.wo"), d, d),
                bo: b.add(format!("block{l}.attn.bo"), 1, d),
                ln2_g: b.add(format!("block{l}.ln2.g"), 1, d),
                ln2_b: b.add(format!("block{l}.ln2.b"), 1, d),
                w1: b.add(format!("block{l}.ffn.w1"), d, config.ffn_hidden),
                b1: b.add(format!("block{l}.ffn.b1"), 1, config.ffn_hidden),
                w2: b.add(format!("block{l}.ffn.w2"), config.ffn_hidden, d),
                b2: b.add(format!("block{l}.ffn.b2"), 1, d),
            })
            .collect();
        let lnf_g = b.add("final.ln.g".into(), 1, d);
        let lnf_b = b.add("final.ln.b".into(), 1, d);
        let cat_emb = b.add("category.embedding".into(), crate::domain::Category::ALL.len(), config.category_embedding);
        let output = OutputLayout {
            targets: config.targets.len(),
            horizon: crate::domain::HORIZON,
            quantiles: config.quantiles.len(),
        };
        let summary = 2 * d + config.category_embedding;
        let w_head = b.add("head.w".into(), summary, output.total());
        let b_head = b.add("head.b".into(), 1, output.total());
        let params = b.shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
        Network {
            input_width,
            context: config.context_minutes,
            width: d,
            heads: config.heads,
            output,
            names: b.names,
            params,
            layout: Layout {
                w_in,
                b_in,
                blocks,
                lnf_g,
                lnf_b,
                cat_emb,
                w_head,
                b_head,
            },
            positions: sinusoidal(config.context_minutes, d),
        }
    }

    /// Scaled-normal weights, unit layer-norm gains, zero biases. The head is
    /// scaled down so initial forecasts sit near zero change.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let layout = self.layout.clone();
        let mut gains = vec![layout.lnf_g];
        for blk in &layout.blocks {
            gains.push(blk.ln1_g);
            gains.push(blk.ln2_g);
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            if gains.contains(&i) {
                p.fill(1.0);
            } else if p.rows == 1 {
                p.fill(0.0);
            } else {
                let mut std = 1.0 / (p.rows as f64).sqrt();
                if i == layout.w_head {
                    std *= 0.1;
                }
                if i == layout.cat_emb {
                    std = 1.0;
                }
                let normal = Normal::new(0.0, std).expect("finite std");
                for x in p.data.iter_mut() {
                    *x = normal.sample(rng);
                }
            }
        }
    }

    pub fn zero_heads(&mut self) {
        self.params[self.layout.w_head].fill(0.0);
        self.params[self.layout.b_head].fill(0.0);
    }

    pub fn input_weight_index(&self) -> usize {
        self.layout.w_in
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Builds the forward graph on `tape` and returns the `1 x outputs` node.
    pub fn graph(&self, tape: &mut Tape<'_>, input: Mat, category: Category) -> Var {
        assert_eq!((input.rows, input.cols), (self.context, self.input_width), "input shape");
        let l = &self.layout;
        let d = self.width;
        let dh = d / self.heads;
        let x = tape.input(input);
        let w_in = tape.param(l.w_in);
        let b_in = tape.param(l.b_in);
        let h = tape.matmul(x, w_in);
        let h = tape.add_row(h, b_in);
        let pos = tape.input(self.positions.clone());
        let mut h = tape.add(h, pos);
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &l.blocks {
            let (g1, b1) = (tape.param(blk.ln1_g), tape.param(blk.ln1_b));
            let a = tape.layer_norm(h, g1, b1);
            let (wq, bq) = (tape.param(blk.wq), tape.param(blk.bq));
            let (wk, bk) = (tape.param(blk.wk), tape.param(blk.bk));
            let (wv, bv) = (tape.param(blk.wv), tape.param(blk.bv));
            let q = tape.matmul(a, wq);
            let q = tape.add_row(q, bq);
            let k = tape.matmul(a, wk);
            let k = tape.add_row(k, bk);
            let v = tape.matmul(a, wv);
            let v = tape.add_row(v, bv);
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_bt(qh, kh);
                let s = tape.scale(s, scale);
                let p = tape.softmax_rows(s);
                heads.push(tape.matmul(p, vh));
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let (wo, bo) = (tape.param(blk.wo), tape.param(blk.bo));
            let o = tape.matmul(o, wo);
            let o = tape.add_row(o, bo);
            h = tape.add(h, o);

            let (g2, b2) = (tape.param(blk.ln2_g), tape.param(blk.ln2_b));
            let f = tape.layer_norm(h, g2, b2);
            let (w1, bb1) = (tape.param(blk.w1), tape.param(blk.b1));
            let (w2, bb2) = (tape.param(blk.w2), tape.param(blk.b2));
            let f = tape.matmul(f, w1);
            let f = tape.add_row(f, bb1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, bb2);
            h = tape.add(h, f);
        }
        let (gf, bf) = (tape.param(l.lnf_g), tape.param(l.lnf_b));
        let h = tape.layer_norm(h, gf, bf);
        let mean = tape.mean_rows(h);
        let last = tape.row(h, self.context - 1);
        let table = tape.param(l.cat_emb);
        let emb = tape.row(table, category.index());
        let z = tape.concat_cols(&[mean, last, emb]);
        let (wh, bh) = (tape.param(l.w_head), tape.param(l.b_head));
        let out = tape.matmul(z, wh);
        tape.add_row(out, bh)
    }

    pub fn forward(&self, input: Mat, category: Category) -> Vec<f64> {
        let mut tape = Tape::new(&self.params);
        let out = self.graph(&mut tape, input, category);
        tape.value(out).data.clone()
    }

    pub fn zero_grads(&self) -> Vec<Mat> {
        self.params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect()
    }

    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| (n.clone(), p.rows, p.cols))
            .collect()
    }
}
