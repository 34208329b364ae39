use super::model::{Mode, Network};
use crate::diffkit::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::preprocess::{trilinear_clamped, Patch};
use crate::scalar::Scalar;

/// Grad-CAM heatmap over the patch voxels (x fastest), max-normalized to
/// `[0, 1]`.
///
/// The target is the output logit. Each extractor's last conv activation `A`
/// is weighted by the spatial mean of `∂logit/∂A` per channel; maps are
/// summed over extractors, rectified, and upsampled with voxel-centre
/// alignment. A map with no positive evidence stays all zero.
pub fn grad_cam<T: Scalar>(net: &Network<T>, patch: &Patch<T>) -> Result<Vec<T>> {
    let x = net.batch_tensor(&[patch])?;
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, x, Mode::Eval, true, None)?;
    g.backward_with(fwd.logit, Tensor::full(vec![1, 1], T::one()));

    let first = g.value(fwd.last_conv[0]).shape().to_vec();
    let (c, d) = (first[1], first[2]);
    let vox = d * d * d;
    let mut cam = vec![T::zero(); vox];
    for &node in &fwd.last_conv {
        let a = g.value(node).data();
        let grad = g
            .grad(node)
            .ok_or_else(|| Error::Shape("last conv layer received no gradient".into()))?
            .data();
        for ch in 0..c {
            let r = ch * vox..(ch + 1) * vox;
            let alpha = grad[r.clone()].iter().copied().sum::<T>() / T::lit(vox as f64);
            for (o, &v) in cam.iter_mut().zip(&a[r]) {
                *o += alpha * v;
            }
        }
    }
    for v in &mut cam {
        *v = v.max(T::zero());
    }

    let side = patch.side;
    let scale = d as f64 / side as f64;
    let mut out = Vec::with_capacity(side * side * side);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let src = [x, y, z].map(|i| (i as f64 + 0.5) * scale - 0.5);
                out.push(trilinear_clamped(&cam, [d, d, d], src));
            }
        }
    }
    let max = out.iter().copied().fold(T::zero(), T::max);
    if max > T::zero() {
        for v in &mut out {
            *v = (*v / max).max(T::zero());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BackboneConfig, LmlccConfig, ModelConfig};

    #[test]
    fn heatmap_is_patch_shaped_and_normalized() {
        let side = 16;
        let vox: Vec<f64> = (0..side * side * side).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let patch = Patch::new("p", side, vox).unwrap();
        for cfg in [
            ModelConfig::Backbone(BackboneConfig::desk(side)),
            ModelConfig::Lmlcc(LmlccConfig::new(2, BackboneConfig::desk(side))),
        ] {
            let net = Network::<f64>::new(cfg, 4).unwrap();
            let h = grad_cam(&net, &patch).unwrap();
            assert_eq!(h.len(), side * side * side);
            assert!(h.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = h.iter().copied().fold(0.0, f64::max);
            assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        }
    }
}
