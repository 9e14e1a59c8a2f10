//! Differentiable 2D convolution via im2col, for the small conv towers
//! (TSCD discriminator). Input `(Cin, H, W)`, weight `(Cout, Cin*kh*kw)`,
//! bias `1 x Cout`.

use ndarray::{Array2, Array3, Axis};

use crate::tape::{as2, dims3, Arr, Var};

/// Output spatial dims for a conv with given stride and symmetric zero pad.
pub fn conv2d_shape(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = conv2d_shape(h, w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for oy in 0..ho {
        for ox in 0..wo {
            let col = oy * wo + ox;
            let mut row = 0;
            for ch in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        cols[[row, col]] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x[[ch, iy as usize, ix as usize]]
                            } else {
                                0.0
                            };
                        row += 1;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (ho, wo) = conv2d_shape(h, w, k, stride, pad);
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for oy in 0..ho {
        for ox in 0..wo {
            let col = oy * wo + ox;
            let mut row = 0;
            for ch in 0..c {
                for dy in 0..k {
                    for dx_ in 0..k {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx_) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            dx[[ch, iy as usize, ix as usize]] += dcols[[row, col]];
                        }
                        row += 1;
                    }
                }
            }
        }
    }
    dx
}

impl<'t> Var<'t> {
    /// Convolve `self` `(Cin, H, W)` with `weight` `(Cout, Cin*k*k)` and
    /// `bias` `(1, Cout)`; returns `(Cout, Ho, Wo)`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, k: usize, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = dims3(&x);
        let wt = weight.value();
        let w2 = as2(&wt).to_owned();
        let cout = w2.shape()[0];
        assert_eq!(w2.shape()[1], c * k * k, "conv2d: weight width mismatch");
        let bv = bias.value();
        let b1 = as2(&bv).row(0).to_owned();
        assert_eq!(b1.len(), cout, "conv2d: bias length mismatch");

        let x3 = x
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let cols = im2col(&x3, k, stride, pad);
        let (ho, wo) = conv2d_shape(h, w, k, stride, pad);
        let mut y2 = w2.dot(&cols);
        for (mut row, &b) in y2.rows_mut().into_iter().zip(b1.iter()) {
            row += b;
        }
        let y = y2
            .into_shape_with_order((cout, ho, wo))
            .unwrap()
            .into_dyn();

        let parents = vec![self.idx, weight.idx, bias.idx];
        let back = Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
            let g2 = g
                .view()
                .into_shape_with_order((cout, ho * wo))
                .unwrap()
                .to_owned();
            sink(1, g2.dot(&cols.t()).into_dyn());
            sink(
                2,
                g2.sum_axis(Axis(1)).insert_axis(Axis(0)).into_dyn(),
            );
            let dcols = w2.t().dot(&g2);
            sink(0, col2im(&dcols, c, h, w, k, stride, pad).into_dyn());
        });
        self.tape.push(y, Some((parents, back)))
    }
}
