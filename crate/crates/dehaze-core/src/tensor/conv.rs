//! im2col convolution kernels shared by the forward op and its backward pass.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};

use crate::scalar::Scalar;

/// Output spatial size of a convolution: floor((n + 2p - k) / s) + 1.
pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn pad_item<F: Scalar>(x: &ArrayView3<F>, pad: usize) -> Array3<F> {
    if pad == 0 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(x);
    out
}

/// Lower one padded item's channel group into a [cg*k*k, ho*wo] matrix.
fn im2col<F: Scalar>(
    xp: &ArrayView3<F>,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let cg = xp.dim().0;
    let mut col = Array2::zeros((cg * k * k, ho * wo));
    for c in 0..cg {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut dst = col.row_mut(row);
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    let src = xp.slice(s![c, iy, kx..kx + (wo - 1) * stride + 1; stride]);
                    dst.slice_mut(s![oy * wo..(oy + 1) * wo]).assign(&src);
                }
            }
        }
    }
    col
}

/// Scatter-add a [cg*k*k, ho*wo] gradient back onto the padded input group.
fn col2im_accum<F: Scalar>(
    gcol: &Array2<F>,
    gxp: &mut ndarray::ArrayViewMut3<F>,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let cg = gxp.dim().0;
    for c in 0..cg {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    let mut dst = gxp.slice_mut(s![c, iy, kx..kx + (wo - 1) * stride + 1; stride]);
                    let src = gcol.slice(s![row, oy * wo..(oy + 1) * wo]);
                    dst.zip_mut_with(&src, |a, &b| *a += b);
                }
            }
        }
    }
}

/// Grouped 2-D convolution. `x` is NCHW, `w` is [cout, cin/groups, k, k].
pub fn conv2d_forward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    bias: Option<&ArrayView1<F>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Array4<F> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_g, k, k2) = w.dim();
    assert_eq!(k, k2, "conv2d: non-square kernel");
    assert_eq!(cin % groups, 0, "conv2d: cin {} not divisible by groups {}", cin, groups);
    assert_eq!(cout % groups, 0, "conv2d: cout {} not divisible by groups {}", cout, groups);
    assert_eq!(cin / groups, cin_g, "conv2d: weight shape disagrees with groups");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let cout_g = cout / groups;

    let mut out = Array4::zeros((n, cout, ho, wo));
    for ni in 0..n {
        let xp = pad_item(&x.index_axis(Axis(0), ni), pad);
        for g in 0..groups {
            let xg = xp.slice(s![g * cin_g..(g + 1) * cin_g, .., ..]);
            let col = im2col(&xg, k, stride, ho, wo);
            let wg = w.slice(s![g * cout_g..(g + 1) * cout_g, .., .., ..]);
            let wmat = wg
                .into_shape((cout_g, cin_g * k * k))
                .expect("conv2d: weight reshape");
            let prod = wmat.dot(&col);
            let prod3 = prod.into_shape((cout_g, ho, wo)).unwrap();
            out.slice_mut(s![ni, g * cout_g..(g + 1) * cout_g, .., ..])
                .assign(&prod3);
        }
    }
    if let Some(b) = bias {
        assert_eq!(b.len(), cout, "conv2d: bias length");
        for c in 0..cout {
            let mut ch = out.slice_mut(s![.., c, .., ..]);
            ch += b[c];
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
/// The im2col buffers are recomputed here rather than retained by the tape.
pub fn conv2d_backward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    grad_out: &ArrayView4<F>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_g, k, _) = w.dim();
    let (gn, gc, ho, wo) = grad_out.dim();
    assert_eq!((gn, gc), (n, cout), "conv2d backward: grad batch/channel mismatch");
    let cout_g = cout / groups;

    let mut gx = Array4::zeros((n, cin, h, wd));
    let mut gw = Array4::<F>::zeros(w.raw_dim());
    let mut gb = Array1::<F>::zeros(cout);

    for c in 0..cout {
        gb[c] = grad_out.slice(s![.., c, .., ..]).sum();
    }

    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    for ni in 0..n {
        let xp = pad_item(&x.index_axis(Axis(0), ni), pad);
        let mut gxp = Array3::<F>::zeros((cin, hp, wp));
        for g in 0..groups {
            let xg = xp.slice(s![g * cin_g..(g + 1) * cin_g, .., ..]);
            let col = im2col(&xg, k, stride, ho, wo);
            let gslice = grad_out.slice(s![ni, g * cout_g..(g + 1) * cout_g, .., ..]);
            let gmat = gslice
                .into_shape((cout_g, ho * wo))
                .expect("conv2d backward: grad reshape");
            let wg = w.slice(s![g * cout_g..(g + 1) * cout_g, .., .., ..]);
            let wmat = wg.into_shape((cout_g, cin_g * k * k)).unwrap();

            let gw_mat = gmat.dot(&col.t());
            let mut gwg = gw.slice_mut(s![g * cout_g..(g + 1) * cout_g, .., .., ..]);
            let gw4 = gw_mat.into_shape((cout_g, cin_g, k, k)).unwrap();
            gwg.zip_mut_with(&gw4, |a, &b| *a += b);

            let gcol = wmat.t().dot(&gmat);
            let mut gxg = gxp.slice_mut(s![g * cin_g..(g + 1) * cin_g, .., ..]);
            col2im_accum(&gcol, &mut gxg, k, stride, ho, wo);
        }
        gx.slice_mut(s![ni, .., .., ..])
            .assign(&gxp.slice(s![.., pad..pad + h, pad..pad + wd]));
    }
    (gx, gw, gb)
}
