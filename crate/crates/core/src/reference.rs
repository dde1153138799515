//! Plain-loop forward passes for the prompt-free model.
//!
//! These read weights straight from a [`ParameterStore`] by name and share
//! no code with the graph-based layers, so they serve as an oracle: with the
//! same operation order they must agree with the graph forward bit for bit.

use crate::attribute::{AttributeSchema, EncodedRecord, EncodedValue};
use crate::error::{Error, Result};
use crate::model::VapFormer;
use crate::params::ParameterStore;
use crate::visual::Volume;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn stack(parts: &[&Mat]) -> Mat {
        let cols = parts[0].cols;
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Mat {
            rows: data.len() / cols,
            cols,
            data,
        }
    }

    fn columns(&self, start: usize, len: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            for c in 0..len {
                out.set(r, c, self.get(r, start + c));
            }
        }
        out
    }
}

struct Weights<'a>(&'a ParameterStore);

impl Weights<'_> {
    fn mat(&self, name: &str) -> Result<Mat> {
        let t = self
            .0
            .get(name)
            .ok_or_else(|| Error::Config(format!("reference model: missing `{name}`")))?;
        let (rows, cols) = match *t.shape() {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => return Err(Error::Config(format!("reference model: `{name}` is not a matrix"))),
        };
        Ok(Mat {
            rows,
            cols,
            data: t.data().to_vec(),
        })
    }

    fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.mat(name)?.data)
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "reference matmul dims");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for p in 0..a.cols {
                s += a.get(i, p) * b.get(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.set(c, r, a.get(r, c));
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

fn linear(w: &Weights<'_>, prefix: &str, x: &Mat) -> Result<Mat> {
    let mut y = matmul(x, &w.mat(&format!("{prefix}.weight"))?);
    let b = w.vec(&format!("{prefix}.bias"))?;
    for r in 0..y.rows {
        for c in 0..y.cols {
            let v = y.get(r, c) + b[c];
            y.set(r, c, v);
        }
    }
    Ok(y)
}

fn layer_norm(w: &Weights<'_>, prefix: &str, x: &Mat) -> Result<Mat> {
    let gamma = w.vec(&format!("{prefix}.gamma"))?;
    let beta = w.vec(&format!("{prefix}.beta"))?;
    let n = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = if var + EPS > 0.0 { 1.0 / (var + EPS).sqrt() } else { 0.0 };
        for c in 0..x.cols {
            out.set(r, c, (row[c] - mean) * inv * gamma[c] + beta[c]);
        }
    }
    Ok(out)
}

fn gelu(v: f64) -> f64 {
    // tanh approximation, sqrt(2/pi) to 17 digits
    0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v)).tanh())
}

/// Row-wise softmax, largest entry subtracted first.
fn softmax_rows(x: &mut Mat) {
    for r in 0..x.rows {
        let max = x.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..x.cols {
            let e = (x.get(r, c) - max).exp();
            x.set(r, c, e);
            sum += e;
        }
        for c in 0..x.cols {
            let v = x.get(r, c) / sum;
            x.set(r, c, v);
        }
    }
}

fn scale(x: &mut Mat, factor: f64) {
    x.data.iter_mut().for_each(|v| *v *= factor);
}

fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let mut scores = matmul(q, &transpose(k));
    scale(&mut scores, 1.0 / (q.cols as f64).sqrt());
    softmax_rows(&mut scores);
    matmul(&scores, v)
}

fn feed_forward(w: &Weights<'_>, prefix: &str, x: &Mat) -> Result<Mat> {
    let h = layer_norm(w, &format!("{prefix}.norm"), x)?;
    let mut h = linear(w, &format!("{prefix}.fc1"), &h)?;
    h.data.iter_mut().for_each(|v| *v = gelu(*v));
    let h = linear(w, &format!("{prefix}.fc2"), &h)?;
    Ok(add(x, &h))
}

fn transformer_layer(w: &Weights<'_>, prefix: &str, heads: usize, x: &Mat) -> Result<Mat> {
    let h = layer_norm(w, &format!("{prefix}.norm"), x)?;
    let q = linear(w, &format!("{prefix}.attn.query"), &h)?;
    let k = linear(w, &format!("{prefix}.attn.key"), &h)?;
    let v = linear(w, &format!("{prefix}.attn.value"), &h)?;
    let dh = x.cols / heads;
    let mut merged = Mat::zeros(x.rows, x.cols);
    for head in 0..heads {
        let o = attention(&q.columns(head * dh, dh), &k.columns(head * dh, dh), &v.columns(head * dh, dh));
        for r in 0..o.rows {
            for c in 0..dh {
                merged.set(r, head * dh + c, o.get(r, c));
            }
        }
    }
    let attn = linear(w, &format!("{prefix}.attn.out"), &merged)?;
    feed_forward(w, &format!("{prefix}.ffn"), &add(x, &attn))
}

fn epa_block(w: &Weights<'_>, prefix: &str, x: &Mat) -> Result<Mat> {
    let h = layer_norm(w, &format!("{prefix}.norm"), x)?;
    let q = linear(w, &format!("{prefix}.query"), &h)?;
    let k = linear(w, &format!("{prefix}.key"), &h)?;

    let vs = linear(w, &format!("{prefix}.value_spatial"), &h)?;
    let spatial = linear(w, &format!("{prefix}.out_spatial"), &attention(&q, &k, &vs))?;

    // channel branch: C × C affinities over the token axis
    let vc = linear(w, &format!("{prefix}.value_channel"), &h)?;
    let mut a = matmul(&transpose(&q), &k);
    scale(&mut a, 1.0 / (x.rows as f64).sqrt());
    softmax_rows(&mut a);
    let channel = linear(w, &format!("{prefix}.out_channel"), &matmul(&vc, &transpose(&a)))?;

    feed_forward(w, &format!("{prefix}.ffn"), &add(x, &add(&spatial, &channel)))
}

/// Visual encoder output for the prompt-free configuration of `model`.
pub fn visual_forward(model: &VapFormer, store: &ParameterStore, volume: &Volume) -> Result<Mat> {
    let cfg = &model.config.visual;
    let w = Weights(store);
    let [d, h, wd] = volume.dims;
    let p = cfg.patch;
    let (gd, gh, gw) = (d / p, h / p, wd / p);
    let mut patches = Mat::zeros(gd * gh * gw, p * p * p);
    for z in 0..d {
        for y in 0..h {
            for x in 0..wd {
                let token = ((z / p) * gh + y / p) * gw + x / p;
                let within = ((z % p) * p + y % p) * p + x % p;
                patches.set(token, within, volume.data[(z * h + y) * wd + x] as f64);
            }
        }
    }
    let mut x = add(&linear(&w, "vis.s0.embed", &patches)?, &w.mat("vis.s0.pos")?);
    let mut grid = [gd, gh, gw];
    for s in 0..cfg.widths.len() {
        if s > 0 {
            let f = cfg.downsample;
            let out = grid.map(|g| g / f);
            let mut merged = Mat::zeros(out.iter().product(), f * f * f * x.cols);
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let token = (oz * out[1] + oy) * out[2] + ox;
                        let mut col = 0;
                        for dz in 0..f {
                            for dy in 0..f {
                                for dx in 0..f {
                                    let src = ((oz * f + dz) * grid[1] + oy * f + dy) * grid[2] + ox * f + dx;
                                    for &v in x.row(src) {
                                        merged.set(token, col, v);
                                        col += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let e = linear(&w, &format!("vis.s{s}.embed"), &merged)?;
            let e = layer_norm(&w, &format!("vis.s{s}.embed.norm"), &e)?;
            x = add(&e, &w.mat(&format!("vis.s{s}.pos"))?);
            grid = out;
        }
        for b in 0..cfg.depths[s] {
            x = epa_block(&w, &format!("vis.s{s}.b{b}"), &x)?;
        }
    }
    Ok(x)
}

/// Attribute encoder output for the prompt-free configuration of `model`.
pub fn tabular_forward(
    model: &VapFormer,
    store: &ParameterStore,
    schema: &AttributeSchema,
    record: &EncodedRecord,
) -> Result<Mat> {
    let w = Weights(store);
    if schema.len() != record.values.len() {
        return Err(Error::Input(format!(
            "reference model: schema has {} attributes, record {}",
            schema.len(),
            record.values.len()
        )));
    }
    let identity = w.mat("tab.embed.identity")?;
    let c = identity.cols;
    let mut x = Mat::zeros(schema.len(), c);
    for (i, (desc, value)) in schema.attributes.iter().zip(&record.values).enumerate() {
        let attr = &desc.name;
        for j in 0..c {
            let v = match *value {
                EncodedValue::OneHot { level, .. } => w.mat(&format!("tab.embed.{attr}.table"))?.get(level, j),
                EncodedValue::Scaled(s) => {
                    w.vec(&format!("tab.embed.{attr}.direction"))?[j] * s + w.vec(&format!("tab.embed.{attr}.bias"))?[j]
                }
            };
            x.set(i, j, v + identity.get(i, j));
        }
    }
    for l in 0..model.config.tabular.depth {
        x = transformer_layer(&w, &format!("tab.l{l}"), model.config.tabular.heads, &x)?;
    }
    Ok(x)
}

/// Logit of the prompt-free model.
pub fn model_logit(
    model: &VapFormer,
    store: &ParameterStore,
    schema: &AttributeSchema,
    volume: &Volume,
    record: &EncodedRecord,
) -> Result<f64> {
    let w = Weights(store);
    let v = linear(&w, "fuse.proj_visual", &visual_forward(model, store, volume)?)?;
    let t = linear(&w, "fuse.proj_tabular", &tabular_forward(model, store, schema, record)?)?;
    let mut x = Mat::stack(&[&w.mat("fuse.cls")?, &v, &t]);
    for l in 0..model.config.fusion.depth {
        x = transformer_layer(&w, &format!("fuse.l{l}"), model.config.fusion.heads, &x)?;
    }
    let cls = Mat {
        rows: 1,
        cols: x.cols,
        data: x.row(0).to_vec(),
    };
    let h = layer_norm(&w, "fuse.norm", &cls)?;
    let mut h = linear(&w, "head.fc1", &h)?;
    h.data.iter_mut().for_each(|v| *v = gelu(*v));
    Ok(linear(&w, "head.fc2", &h)?.data[0])
}
