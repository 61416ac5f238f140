//! Tensor-level differentiable operations. Every forward op has a matching
//! `*_backward` that accumulates (`+=`) into the operands' gradient buffers.

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a).ok_or_else(|| Error::dim("matmul", a.shape(), b.shape()))?;
    let (k2, n) = as_matrix(b).ok_or_else(|| Error::dim("matmul", a.shape(), b.shape()))?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for (row, o) in a.data().chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        kernels::vec_mat_acc(row, b.data(), o);
    }
    Tensor::new(&[m, n], out)
}

/// `dL/da += dL/dc · bᵀ`, `dL/db += aᵀ · dL/dc`.
pub fn matmul_backward(a: &mut Tensor, b: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    let (m, k) = as_matrix(a).ok_or_else(|| Error::dim("matmul_backward", a.shape(), b.shape()))?;
    let (_, n) = as_matrix(b).ok_or_else(|| Error::dim("matmul_backward", a.shape(), b.shape()))?;
    if grad_out.shape() != [m, n] {
        return Err(Error::dim("matmul_backward", &[m, n], grad_out.shape()));
    }
    let bd = b.data().to_vec();
    {
        let ga = a.grad_mut();
        for (dy, da) in grad_out.data().chunks_exact(n).zip(ga.chunks_exact_mut(k)) {
            kernels::mat_vec_acc(&bd, dy, da);
        }
    }
    let ad = a.data().to_vec();
    let gb = b.grad_mut();
    for (x, dy) in ad.chunks_exact(k).zip(grad_out.data().chunks_exact(n)) {
        kernels::outer_acc(x, dy, gb);
    }
    Ok(())
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() || x.shape().len() != 1 {
        return Err(Error::dim("softmax", x.shape(), &[]));
    }
    let mut out = vec![0.0; x.len()];
    kernels::softmax_into(x.data(), &mut out);
    Tensor::new(x.shape(), out)
}

/// Accumulates `Jᵀ · grad_out` into `x.grad`, where `output = softmax(x)`.
pub fn softmax_backward(x: &mut Tensor, output: &Tensor, grad_out: &Tensor) -> Result<()> {
    if x.shape() != output.shape() || x.shape() != grad_out.shape() {
        return Err(Error::dim("softmax_backward", x.shape(), grad_out.shape()));
    }
    kernels::softmax_backward_acc(output.data(), grad_out.data(), x.grad_mut());
    Ok(())
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeometry> {
    let (&[h, w, c_in], &[kh, kw, kc, c_out]) = (input.shape(), kernel.shape()) else {
        return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
    };
    if kc != c_in || stride == 0 {
        return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
    }
    let g = ConvGeometry {
        in_h: h,
        in_w: w,
        c_in,
        k_h: kh,
        k_w: kw,
        c_out,
        stride,
    };
    let padded_h = (g.out_h() - 1) * stride + kh;
    let padded_w = (g.out_w() - 1) * stride + kw;
    if kh > padded_h.max(h) || kw > padded_w.max(w) {
        return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
    }
    Ok(g)
}

/// Same-padded cross-correlation of an `h × w × c_in` input with a
/// `kh × kw × c_in × c_out` kernel. Output is `ceil(h/s) × ceil(w/s) × c_out`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride)?;
    let mut out = vec![0.0; g.output_len()];
    kernels::conv2d_forward(&g, input.data(), kernel.data(), None, &mut out);
    Tensor::new(&[g.out_h(), g.out_w(), g.c_out], out)
}

pub fn conv2d_backward(
    input: &mut Tensor,
    kernel: &mut Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<()> {
    let g = conv_geometry(input, kernel, stride)?;
    if grad_out.len() != g.output_len() {
        return Err(Error::dim("conv2d_backward", input.shape(), grad_out.shape()));
    }
    let (inp, ker) = (input.data().to_vec(), kernel.data().to_vec());
    let mut gk = vec![0.0; ker.len()];
    kernels::conv2d_backward(
        &g,
        &inp,
        &ker,
        grad_out.data(),
        Some(input.grad_mut()),
        &mut gk,
        None,
    );
    kernels::axpy(1.0, &gk, kernel.grad_mut());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

pub fn unary(op: Unary, x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| match op {
            Unary::Tanh => kernels::tanh(v),
            Unary::Sigmoid => kernels::sigmoid(v),
        })
        .collect();
    Tensor::new(x.shape(), data).expect("shape preserved")
}

/// Accumulates the pointwise derivative using the forward `output`.
pub fn unary_backward(op: Unary, x: &mut Tensor, output: &Tensor, grad_out: &Tensor) -> Result<()> {
    if x.shape() != output.shape() || x.shape() != grad_out.shape() {
        return Err(Error::dim("unary_backward", x.shape(), grad_out.shape()));
    }
    let gx = x.grad_mut();
    for ((g, y), d) in gx.iter_mut().zip(output.data()).zip(grad_out.data()) {
        *g += d * match op {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
        };
    }
    Ok(())
}

pub fn binary(op: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("elementwise", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| match op {
            Binary::Add => x + y,
            Binary::Mul => x * y,
        })
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn binary_backward(op: Binary, a: &mut Tensor, b: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != grad_out.shape() {
        return Err(Error::dim("elementwise_backward", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data().to_vec(), b.data().to_vec());
    {
        let ga = a.grad_mut();
        for i in 0..ga.len() {
            ga[i] += grad_out.data()[i]
                * match op {
                    Binary::Add => 1.0,
                    Binary::Mul => bd[i],
                };
        }
    }
    let gb = b.grad_mut();
    for i in 0..gb.len() {
        gb[i] += grad_out.data()[i]
            * match op {
                Binary::Add => 1.0,
                Binary::Mul => ad[i],
            };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let b = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = matmul(&Tensor::identity(2), &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn zero_matmul() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let p = softmax(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
        for c in [-3.0, 0.0, 17.5, 1e3] {
            let p = softmax(&Tensor::from_vec(vec![c, c])).unwrap();
            assert_eq!(p.data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let empty = Tensor::from_vec(vec![]);
        assert!(matches!(softmax(&empty), Err(Error::Dimension { .. })));
    }

    #[test]
    fn identity_1x1_conv() {
        let input = Tensor::new(&[3, 2, 2], (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 2, 2]);
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let out = conv2d(&input, &k, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_kernel_conv() {
        let input = Tensor::filled(&[4, 4, 2], 0.7);
        let out = conv2d(&input, &Tensor::zeros(&[3, 3, 2, 5]), 2).unwrap();
        assert_eq!(out.shape(), &[2, 2, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let input = Tensor::zeros(&[4, 4, 2]);
        assert!(matches!(
            conv2d(&input, &Tensor::zeros(&[3, 3, 3, 1]), 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pointwise_identities() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(unary(Unary::Tanh, &z).data().iter().all(|&v| v == 0.0));
        assert!(unary(Unary::Sigmoid, &z).data().iter().all(|&v| v == 0.5));
        assert!(binary(Binary::Add, &z, &Tensor::zeros(&[3, 2])).is_err());
    }
}
