use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::{embed_into, BlockLayout, VectorFieldParams, LAYER_NORM_EPS};
use crate::error::{shape_err, Result};
use crate::numerics::{normal_cdf, normal_pdf};

/// Activations kept from [`VectorFieldParams::forward_trace`] for the backward pass.
pub struct Trace {
    input: Array2<f64>,
    embed: Array2<f64>,
    blocks: Vec<BlockTrace>,
    last_hidden: Array2<f64>,
    pub output: Array2<f64>,
}

struct BlockTrace {
    norm: Array2<f64>,
    inv_std: Array1<f64>,
    affine: Array2<f64>,
    ada: Array2<f64>,
    modulated: Array2<f64>,
    pre: Array2<f64>,
    cdf: Array2<f64>,
    act: Array2<f64>,
}

impl VectorFieldParams {
    fn view(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.values[off..off + rows * cols]).expect("layout")
    }

    fn vec_view(&self, off: usize, n: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[off..off + n])
    }

    fn check_inputs(&self, z: &ArrayView2<f64>, m: &ArrayView2<f64>) -> Result<()> {
        let d = self.cfg.d;
        if z.ncols() != d || m.ncols() != d || z.nrows() != m.nrows() {
            return Err(shape_err(format!(
                "field expects n x {d} state and mask, got {:?} and {:?}",
                z.dim(),
                m.dim()
            )));
        }
        Ok(())
    }

    fn input_projection(&self, z: &ArrayView2<f64>, m: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (n, d, h) = (z.nrows(), self.cfg.d, self.cfg.hidden);
        let mut x = Array2::zeros((n, 2 * d));
        x.slice_mut(s![.., ..d]).assign(z);
        x.slice_mut(s![.., d..]).assign(m);
        let mut hid = x.dot(&self.view(self.layout.in_w, 2 * d, h));
        hid += &self.vec_view(self.layout.in_b, h);
        (x, hid)
    }

    fn ada_head(&self, b: &BlockLayout, embed: &ArrayView2<f64>) -> Array2<f64> {
        let (e, h) = (self.cfg.time_embed_dim, self.cfg.hidden);
        let mut a = embed.dot(&self.view(b.ada_w, e, 2 * h));
        a += &self.vec_view(b.ada_b, 2 * h);
        a
    }

    /// One residual block. `ada` holds `[gamma | beta]` per row (possibly broadcast).
    fn block_forward(
        &self,
        b: &BlockLayout,
        hid: &mut Array2<f64>,
        ada: ArrayView2<f64>,
        keep: bool,
    ) -> Option<BlockTrace> {
        let (n, h, f) = (hid.nrows(), self.cfg.hidden, self.cfg.ff_width());
        let gain = self.vec_view(b.ln_gain, h);
        let bias = self.vec_view(b.ln_bias, h);

        let mut norm = Array2::zeros((n, h));
        let mut inv_std = Array1::zeros(n);
        for ((row, mut out), inv) in hid.rows().into_iter().zip(norm.rows_mut()).zip(inv_std.iter_mut()) {
            let mean = row.sum() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * *inv);
        }
        let affine = &norm * &gain + &bias;
        let gamma = ada.slice(s![.., ..h]);
        let beta = ada.slice(s![.., h..]);
        let mut modulated = Array2::zeros((n, h));
        Zip::from(&mut modulated)
            .and(&affine)
            .and(&gamma)
            .and(&beta)
            .for_each(|u, &a, &g, &bt| *u = (1.0 + g) * a + bt);

        let mut pre = modulated.dot(&self.view(b.fc1_w, h, f));
        pre += &self.vec_view(b.fc1_b, f);
        let cdf = pre.mapv(normal_cdf);
        let act = &pre * &cdf;
        let mut res = act.dot(&self.view(b.fc2_w, f, h));
        res += &self.vec_view(b.fc2_b, h);
        *hid += &res;

        keep.then(|| BlockTrace {
            norm,
            inv_std,
            affine,
            ada: ada.to_owned(),
            modulated,
            pre,
            cdf,
            act,
        })
    }

    fn output_projection(&self, hid: &Array2<f64>) -> Array2<f64> {
        let (h, d) = (self.cfg.hidden, self.cfg.d);
        let mut v = hid.dot(&self.view(self.layout.out_w, h, d));
        v += &self.vec_view(self.layout.out_b, d);
        v
    }

    /// Batched evaluation at a single time `t` shared by every row.
    pub fn forward(&self, z: ArrayView2<f64>, m: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        self.check_inputs(&z, &m)?;
        let (n, e, h) = (z.nrows(), self.cfg.time_embed_dim, self.cfg.hidden);
        let mut emb = Array2::zeros((1, e));
        embed_into(t, emb.as_slice_mut().expect("contiguous"));
        let (_, mut hid) = self.input_projection(&z, &m);
        for b in &self.layout.blocks {
            let ada = self.ada_head(b, &emb.view());
            let ada = ada.broadcast((n, 2 * h)).expect("row broadcast");
            self.block_forward(b, &mut hid, ada, false);
        }
        Ok(self.output_projection(&hid))
    }

    /// Single-point convenience wrapper around [`forward`](Self::forward).
    pub fn forward_point(&self, z: &[f64], m: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = z.len();
        let zv = ArrayView2::from_shape((1, d), z).map_err(|e| shape_err(e.to_string()))?;
        let mv = ArrayView2::from_shape((1, m.len()), m).map_err(|e| shape_err(e.to_string()))?;
        Ok(self.forward(zv, mv, t)?.into_raw_vec_and_offset().0)
    }

    /// Batched evaluation with one time per row, keeping every activation needed
    /// by [`backward`](Self::backward).
    pub fn forward_trace(&self, z: ArrayView2<f64>, m: ArrayView2<f64>, t: &[f64]) -> Result<Trace> {
        self.check_inputs(&z, &m)?;
        if t.len() != z.nrows() {
            return Err(shape_err(format!("{} times for {} rows", t.len(), z.nrows())));
        }
        let e = self.cfg.time_embed_dim;
        let mut embed = Array2::zeros((t.len(), e));
        for (mut row, &ti) in embed.rows_mut().into_iter().zip(t) {
            embed_into(ti, row.as_slice_mut().expect("contiguous"));
        }
        let (input, mut hid) = self.input_projection(&z, &m);
        let mut blocks = Vec::with_capacity(self.cfg.blocks);
        for b in &self.layout.blocks {
            let ada = self.ada_head(b, &embed.view());
            blocks.push(self.block_forward(b, &mut hid, ada.view(), true).expect("kept"));
        }
        let output = self.output_projection(&hid);
        Ok(Trace { input, embed, blocks, last_hidden: hid, output })
    }

    /// Exact reverse-mode gradient of `sum(upstream * output)` with respect to
    /// every parameter, laid out like [`values`](Self::values).
    pub fn backward(&self, trace: &Trace, upstream: ArrayView2<f64>) -> Result<Vec<f64>> {
        if upstream.dim() != trace.output.dim() {
            return Err(shape_err(format!(
                "upstream {:?} vs output {:?}",
                upstream.dim(),
                trace.output.dim()
            )));
        }
        let (d, h, e, f) = (self.cfg.d, self.cfg.hidden, self.cfg.time_embed_dim, self.cfg.ff_width());
        let n = upstream.nrows();
        let mut grads = vec![0.0; self.len()];
        let lay = &self.layout;

        weight_grad(&mut grads, lay.out_w, &trace.last_hidden.view(), &upstream, h, d);
        bias_grad(&mut grads, lay.out_b, &upstream);
        let mut dh = upstream.dot(&self.view(lay.out_w, h, d).t());

        for (b, bt) in lay.blocks.iter().zip(&trace.blocks).rev() {
            // residual branch: res = act W2 + b2
            weight_grad(&mut grads, b.fc2_w, &bt.act.view(), &dh.view(), f, h);
            bias_grad(&mut grads, b.fc2_b, &dh.view());
            let mut dpre = dh.dot(&self.view(b.fc2_w, f, h).t());
            Zip::from(&mut dpre)
                .and(&bt.pre)
                .and(&bt.cdf)
                .for_each(|g, &p, &c| *g *= c + p * normal_pdf(p));
            weight_grad(&mut grads, b.fc1_w, &bt.modulated.view(), &dpre.view(), h, f);
            bias_grad(&mut grads, b.fc1_b, &dpre.view());
            let dmod = dpre.dot(&self.view(b.fc1_w, h, f).t());

            // modulation: u = (1 + gamma) * affine + beta
            let mut dada = Array2::zeros((n, 2 * h));
            let mut daffine = Array2::zeros((n, h));
            {
                let (mut dgamma, mut dbeta) = dada.multi_slice_mut((s![.., ..h], s![.., h..]));
                Zip::from(&mut dgamma).and(&dmod).and(&bt.affine).for_each(|g, &du, &a| *g = du * a);
                dbeta.assign(&dmod);
                let gamma = bt.ada.slice(s![.., ..h]);
                Zip::from(&mut daffine).and(&dmod).and(&gamma).for_each(|g, &du, &gm| *g = du * (1.0 + gm));
            }
            weight_grad(&mut grads, b.ada_w, &trace.embed.view(), &dada.view(), e, 2 * h);
            bias_grad(&mut grads, b.ada_b, &dada.view());

            // affine LayerNorm
            let gain_grad = (&daffine * &bt.norm).sum_axis(Axis(0));
            add_into(&mut grads[b.ln_gain..b.ln_gain + h], gain_grad.view());
            bias_grad(&mut grads, b.ln_bias, &daffine.view());
            let dnorm = &daffine * &self.vec_view(b.ln_gain, h);
            for (((mut dh_row, dn), nr), &inv) in dh
                .rows_mut()
                .into_iter()
                .zip(dnorm.rows())
                .zip(bt.norm.rows())
                .zip(bt.inv_std.iter())
            {
                let mean_dn = dn.sum() / h as f64;
                let mean_dn_n = dn.iter().zip(nr.iter()).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                Zip::from(&mut dh_row)
                    .and(&dn)
                    .and(&nr)
                    .for_each(|g, &a, &x| *g += inv * (a - mean_dn - x * mean_dn_n));
            }
        }

        weight_grad(&mut grads, lay.in_w, &trace.input.view(), &dh.view(), 2 * d, h);
        bias_grad(&mut grads, lay.in_b, &dh.view());
        Ok(grads)
    }
}

fn weight_grad(
    grads: &mut [f64],
    off: usize,
    input: &ArrayView2<f64>,
    delta: &ArrayView2<f64>,
    rows: usize,
    cols: usize,
) {
    let mut g = ArrayViewMut2::from_shape((rows, cols), &mut grads[off..off + rows * cols]).expect("layout");
    general_mat_mul(1.0, &input.t(), delta, 1.0, &mut g);
}

fn bias_grad(grads: &mut [f64], off: usize, delta: &ArrayView2<f64>) {
    let n = delta.ncols();
    add_into(&mut grads[off..off + n], delta.sum_axis(Axis(0)).view());
}

fn add_into(dst: &mut [f64], src: ArrayView1<f64>) {
    for (a, b) in dst.iter_mut().zip(src.iter()) {
        *a += b;
    }
}
