//! Input saliency of a matching loss and binary graymap output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use l2tww_autodiff::{grad, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::transfer::{MatchConfig, Pair, TransferModel};

/// `max_c |∂f/∂x_{c,i,j}|` over a single image `[1,C,H,W]`, divided by its
/// maximum (an all-zero map stays zero). Returns `[H,W]`.
pub fn saliency_of(x: &Tensor, f: impl FnOnce(&Var) -> Result<Var>) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Spec(format!("saliency expects one image [1,C,H,W], got {s:?}")));
    }
    let g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&xv)?;
    let dx = grad(&loss, &[xv], false)?;
    Ok(channel_max_normalized(&dx[0].value()))
}

fn channel_max_normalized(dx: &Tensor) -> Tensor {
    let s = dx.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut m = vec![0.0f64; hw];
    for ch in 0..c {
        for (mi, v) in m.iter_mut().zip(&dx.data()[ch * hw..(ch + 1) * hw]) {
            *mi = mi.max(v.abs());
        }
    }
    let top = m.iter().cloned().fold(0.0, f64::max);
    if top > 0.0 {
        m.iter_mut().for_each(|v| *v /= top);
    }
    Tensor::new(&[s[2], s[3]], m).expect("consistent length")
}

/// Saliency of one pair's matching loss for a single image, with gradients
/// flowing through the target, the frozen source and the meta-networks.
pub fn saliency(model: &TransferModel, theta: &ParamSet, phi: &ParamSet, x: &Tensor, pair: &Pair) -> Result<Tensor> {
    model.matching.position(pair)?;
    let single = TransferModel {
        matching: MatchConfig {
            pairs: vec![*pair],
            ..model.matching.clone()
        },
        ..model.clone()
    };
    saliency_of(x, |xv| {
        let g = xv.graph().clone();
        let src = single
            .sources
            .iter()
            .map(|s| Ok(s.forward(&s.params.bind(&g, false), xv)?.taps))
            .collect::<Result<Vec<_>>>()?;
        let fwd = single.forward(&g, &theta.bind(&g, false), &phi.bind(&g, false), xv, &src)?;
        Ok(fwd.terms[0].loss.mean()?)
    })
}

/// Writes `[H,W]` values in `[0,1]` as an 8-bit binary graymap, `round(255·v)`.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Spec(format!("graymap needs [H,W], got {s:?}")));
    }
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    write!(out, "P5\n{} {}\n255\n", s[1], s[0]).map_err(io)?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    out.write_all(&bytes).map_err(io)?;
    out.flush().map_err(io)
}

/// Maps a signed difference in `[-1,1]` to `[0,1]` (0.5 = no change).
pub fn signed_to_unit(diff: &Tensor) -> Tensor {
    diff.map(|d| 0.5 * (d.clamp(-1.0, 1.0) + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_gives_zero_map() {
        let x = Tensor::ones(&[1, 2, 3, 3]);
        let m = saliency_of(&x, |xv| Ok(xv.graph().constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(m.shape(), &[3, 3]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_loss_gives_channel_max_of_coefficients() {
        let a = Tensor::new(&[1, 3, 1, 2], vec![0.5, -2.0, -1.5, 1.0, 0.2, 0.1]).unwrap();
        let x = Tensor::from_fn(&[1, 3, 1, 2], |i| i as f64);
        let m = saliency_of(&x, |xv| Ok(xv.mul(&xv.graph().constant(a.clone()))?.sum()?)).unwrap();
        // pixel 0: max(0.5, 1.5, 0.2) = 1.5; pixel 1: max(2, 1, 0.1) = 2
        assert_eq!(m.data(), &[0.75, 1.0]);
    }

    #[test]
    fn positive_scaling_leaves_map_unchanged() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f64 * 0.7).sin());
        let f = |c: f64| move |xv: &Var| Ok(xv.square()?.exp().sum()?.scale(c));
        let a = saliency_of(&x, f(1.0)).unwrap();
        let b = saliency_of(&x, f(37.0)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(a.max_abs(), 1.0);
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = Tensor::new(&[2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.999, 0.1]).unwrap();
        write_pgm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64, 255, 26]);
    }
}
