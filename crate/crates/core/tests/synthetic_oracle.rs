//! Pixel-space template matching must find the target in generated pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scd_core::trainer::{generate_pair, PairSpec, SyntheticPair};

/// Zero-mean NCC of the exemplar's central target patch against every
/// window of the search image; returns the best window centre.
fn match_template(p: &SyntheticPair, t: usize) -> (usize, usize) {
    let e = p.exemplar.dims().h;
    let s = p.search.dims().h;
    let off = e / 2 - t / 2;
    let channels = p.exemplar.dims().c;
    let mut tpl = Vec::with_capacity(channels * t * t);
    for c in 0..channels {
        for i in 0..t {
            for j in 0..t {
                tpl.push(p.exemplar.at(0, c, off + i, off + j));
            }
        }
    }
    let mean = tpl.iter().sum::<f64>() / tpl.len() as f64;
    tpl.iter_mut().for_each(|v| *v -= mean);
    let tnorm = tpl.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut best = (f64::NEG_INFINITY, (0, 0));
    let mut win = vec![0.0; tpl.len()];
    for y in 0..=s - t {
        for x in 0..=s - t {
            let mut k = 0;
            for c in 0..channels {
                for i in 0..t {
                    for j in 0..t {
                        win[k] = p.search.at(0, c, y + i, x + j);
                        k += 1;
                    }
                }
            }
            let m = win.iter().sum::<f64>() / win.len() as f64;
            let (mut dot, mut nn) = (0.0, 0.0);
            for (a, b) in tpl.iter().zip(&win) {
                dot += a * (b - m);
                nn += (b - m) * (b - m);
            }
            let score = dot / (tnorm * nn.sqrt() + 1e-12);
            if score > best.0 {
                best = (score, (y + t / 2, x + t / 2));
            }
        }
    }
    best.1
}

#[test]
fn template_matching_recovers_the_centre() {
    let spec = PairSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 1000;
    let mut hits = 0;
    for _ in 0..trials {
        let p = generate_pair(&mut rng, &spec).unwrap();
        let (y, x) = match_template(&p, spec.target_size);
        let dy = y as f64 - p.center.0 as f64;
        let dx = x as f64 - p.center.1 as f64;
        if dy.abs() <= 2.0 && dx.abs() <= 2.0 {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    assert!(rate >= 0.95, "recovered {hits}/{trials}");
}
