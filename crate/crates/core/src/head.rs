//! Prototype metric head.
//!
//! Prototypes are per-class means of support features. A query is compared
//! with each prototype through four Frobenius distances between the pair and
//! its time reversal; the two mixed pairs enter as (guarded) reciprocals so
//! that a close match with the reversed sequence counts against the class.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Guard inside the reciprocal distances.
pub const RECIP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBundle {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d: f64,
}

/// Graph handles of one prototype/query comparison.
#[derive(Debug, Clone, Copy)]
pub struct DistanceVars {
    pub d1: Var,
    pub d2: Var,
    pub d3: Var,
    pub d4: Var,
    pub d: Var,
}

/// Feature together with its time reversal, so reversals are computed once.
#[derive(Debug, Clone, Copy)]
pub struct Oriented {
    pub fwd: Var,
    pub rev: Var,
}

impl Oriented {
    pub fn new(g: &mut Graph, x: Var) -> Result<Self> {
        Ok(Self {
            fwd: x,
            rev: g.reverse(x, 0)?,
        })
    }
}

pub fn prototype_var(g: &mut Graph, supports: &[Var]) -> Result<Var> {
    let Some(&first) = supports.first() else {
        return invalid("prototype needs at least one support feature");
    };
    let mut acc = first;
    for &s in &supports[1..] {
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, 1.0 / supports.len() as f64))
}

pub fn cross_distance_var(g: &mut Graph, p: Oriented, q: Oriented) -> Result<DistanceVars> {
    let dist = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let diff = g.sub(a, b)?;
        Ok(g.frobenius(diff))
    };
    let d1 = dist(g, p.fwd, q.fwd)?;
    let d2 = dist(g, p.rev, q.rev)?;
    let m3 = dist(g, p.fwd, q.rev)?;
    let m4 = dist(g, p.rev, q.fwd)?;
    let m3 = g.add_scalar(m3, RECIP_EPS);
    let d3 = g.recip(m3);
    let m4 = g.add_scalar(m4, RECIP_EPS);
    let d4 = g.recip(m4);
    // (d1 + d2) + (d3 + d4) is bit-symmetric under the reversal swap
    let same = g.add(d1, d2)?;
    let mixed = g.add(d3, d4)?;
    let s = g.add(same, mixed)?;
    let d = g.scale(s, 0.25);
    Ok(DistanceVars { d1, d2, d3, d4, d })
}

/// `[n_classes]` vector of mean cross distances from `query` to each prototype.
pub fn distances_var(g: &mut Graph, prototypes: &[Oriented], query: Oriented) -> Result<Var> {
    if prototypes.is_empty() {
        return invalid("no prototypes");
    }
    let ds = prototypes
        .iter()
        .map(|&p| cross_distance_var(g, p, query).map(|v| v.d))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&ds, 0)
}

/// `-log softmax(-d)[target]`.
pub fn classification_loss_var(g: &mut Graph, d: Var, target: usize) -> Result<Var> {
    let n = g.value(d).len();
    if target >= n {
        return invalid(format!("target class {target} out of range for {n} classes"));
    }
    let neg = g.neg(d);
    let p = g.softmax(neg, 0)?;
    let logp = g.log(p);
    let pick = g.slice(logp, 0, target, 1)?;
    Ok(g.neg(pick))
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

// ---- tensor-level entry points ---------------------------------------------

pub fn build_prototype(supports: &[Tensor]) -> Result<Tensor> {
    let Some(first) = supports.first() else {
        return invalid("prototype needs at least one support feature");
    };
    if let Some(bad) = supports.iter().find(|s| s.shape() != first.shape()) {
        return shape_err("build_prototype", first.shape(), bad.shape());
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = supports.iter().map(|s| g.constant(s)).collect();
    let p = prototype_var(&mut g, &vars)?;
    Ok(g.tensor(p))
}

pub fn time_reverse(x: &Tensor) -> Tensor {
    x.time_reversed()
}

pub fn cross_distance(p: &Tensor, q: &Tensor) -> Result<DistanceBundle> {
    if p.shape() != q.shape() {
        return shape_err("cross_distance", p.shape(), q.shape());
    }
    let mut g = Graph::new();
    let pv = g.constant(p);
    let qv = g.constant(q);
    let po = Oriented::new(&mut g, pv)?;
    let qo = Oriented::new(&mut g, qv)?;
    let v = cross_distance_var(&mut g, po, qo)?;
    Ok(DistanceBundle {
        d1: g.scalar(v.d1),
        d2: g.scalar(v.d2),
        d3: g.scalar(v.d3),
        d4: g.scalar(v.d4),
        d: g.scalar(v.d),
    })
}

/// `(predicted class, per-class d)`.
pub fn classify(query: &Tensor, prototypes: &[Tensor]) -> Result<(usize, Vec<f64>)> {
    if prototypes.is_empty() {
        return invalid("no prototypes");
    }
    let d = prototypes
        .iter()
        .map(|p| cross_distance(p, query).map(|b| b.d))
        .collect::<Result<Vec<_>>>()?;
    let pred = argmin(&d).expect("non-empty");
    Ok((pred, d))
}

pub fn classification_loss(d: &[f64], target: usize) -> Result<f64> {
    let mut g = Graph::new();
    let dv = g.constant_from(&[d.len()], d.to_vec())?;
    let l = classification_loss_var(&mut g, dv, target)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frob_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn prototype_cases() {
        let a = Tensor::from_rows(&[&[1.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0, 3.0]]).unwrap();
        assert_eq!(build_prototype(&[a.clone()]).unwrap(), a);
        assert_eq!(build_prototype(&[a.clone(), b]).unwrap().data(), &[2.0, 2.0]);
        assert!(build_prototype(&[]).is_err());

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let feats: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4, 3], 2.0, &mut r)).collect();
        let p = build_prototype(&feats).unwrap();
        for i in 0..12 {
            let want = (feats[0].data()[i] + feats[1].data()[i] + feats[2].data()[i]) / 3.0;
            assert!((p.data()[i] - want).abs() < 1e-15);
        }
        let perm = build_prototype(&[feats[2].clone(), feats[0].clone(), feats[1].clone()]).unwrap();
        for (x, y) in p.data().iter().zip(perm.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn time_reverse_cases() {
        let one = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(time_reverse(&one), one);
        let x = Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]).unwrap();
        assert_eq!(time_reverse(&x).data(), &[3.0, 2.0, 1.0]);
        assert_eq!(time_reverse(&time_reverse(&x)), x);
    }

    #[test]
    fn cross_distance_identical_inputs() {
        let p = Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let b = cross_distance(&p, &p).unwrap();
        let r = 1.0 / (2f64.sqrt() + RECIP_EPS);
        assert_eq!((b.d1, b.d2), (0.0, 0.0));
        assert!((b.d3 - r).abs() < 1e-15 && (b.d4 - r).abs() < 1e-15);
    }

    #[test]
    fn cross_distance_worked_example() {
        let p = Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let q = Tensor::from_rows(&[&[2.0], &[0.0]]).unwrap();
        let b = cross_distance(&p, &q).unwrap();
        // direct norms: |p - q| = 1, |p - rev q| = |(1,0) - (0,2)| = sqrt 5
        let r = 1.0 / (5f64.sqrt() + RECIP_EPS);
        assert!((b.d1 - 1.0).abs() < 1e-15);
        assert!((b.d2 - 1.0).abs() < 1e-15);
        assert!((b.d3 - r).abs() < 1e-15);
        assert!((b.d4 - r).abs() < 1e-15);
        assert!((b.d - (2.0 + 2.0 * r) / 4.0).abs() < 1e-15);
        assert!((b.d3 - 0.4472).abs() < 1e-4 && (b.d - 0.7236).abs() < 1e-4);
    }

    #[test]
    fn classify_cases() {
        assert_eq!(argmin(&[0.5, 0.2, 0.9]), Some(1));
        assert_eq!(argmin(&[0.5, 0.2, 0.2]), Some(1));
        assert_eq!(argmin(&[]), None);

        let mut r = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let far = |r: &mut ChaCha8Rng| {
            let t = Tensor::uniform(&[4, 2], 1.0, r);
            Tensor::new(&[4, 2], t.data().iter().map(|v| v + 10.0).collect()).unwrap()
        };
        let protos = vec![q.clone(), far(&mut r), far(&mut r)];
        assert_eq!(classify(&q, &protos).unwrap().0, 0);
        assert!(classify(&q, &[]).is_err());

        // equal prototypes tie; the lowest index wins
        let protos = vec![far(&mut r), q.time_reversed(), q.time_reversed()];
        let (pred, d) = classify(&q, &protos).unwrap();
        assert_eq!(d[1], d[2]);
        assert_eq!(pred, argmin(&d).unwrap());
    }

    #[test]
    fn classification_loss_closed_forms() {
        let l = classification_loss(&[0.7; 5], 2).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let l = classification_loss(&[0.0, 1.0], 0).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let l = classification_loss(&[-200.0, 0.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(classification_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let protos: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[5, 2], 1.0, &mut r)).collect();
        let q = Tensor::uniform(&[5, 2], 1.0, &mut r);
        let rep = crate::autodiff::grad_check(
            |g, x| {
                let qo = Oriented::new(g, x)?;
                let ps = protos
                    .iter()
                    .map(|p| {
                        let v = g.constant(p);
                        Oriented::new(g, v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let d = distances_var(g, &ps, qo)?;
                classification_loss_var(g, d, 1)
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    proptest! {
        #[test]
        fn reversal_swaps_terms_and_keeps_d(
            p in prop::collection::vec(-3.0f64..3.0, 12),
            q in prop::collection::vec(-3.0f64..3.0, 12),
        ) {
            let p = Tensor::new(&[4, 3], p).unwrap();
            let q = Tensor::new(&[4, 3], q).unwrap();
            let a = cross_distance(&p, &q).unwrap();
            let b = cross_distance(&p.time_reversed(), &q.time_reversed()).unwrap();
            prop_assert_eq!(a.d1, b.d2);
            prop_assert_eq!(a.d2, b.d1);
            prop_assert_eq!(a.d3, b.d4);
            prop_assert_eq!(a.d4, b.d3);
            prop_assert_eq!(a.d, b.d);
            prop_assert!((a.d1 - frob_diff(&p, &q)).abs() < 1e-12);
        }

        #[test]
        fn loss_is_non_negative(d in prop::collection::vec(-5.0f64..5.0, 2..6), t in 0usize..2) {
            prop_assert!(classification_loss(&d, t).unwrap() >= 0.0);
        }
    }
}
