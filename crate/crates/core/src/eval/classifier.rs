//! fastText-style sentence classifier: hashed word unigram and bigram
//! embeddings, averaged, followed by a linear softmax layer, trained with
//! plain SGD.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub dim: usize,
    pub buckets: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            buckets: 1 << 14,
            epochs: 10,
            lr: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StyleClassifier {
    dim: usize,
    buckets: usize,
    classes: usize,
    emb: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h ^= 0x20;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        for b in p.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl StyleClassifier {
    /// Bucket ids of every unigram and bigram of `text`.
    pub fn features(&self, text: &str) -> Vec<usize> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let b = self.buckets as u64;
        let mut f: Vec<usize> = words.iter().map(|w| (fnv1a(&[w]) % b) as usize).collect();
        f.extend(words.windows(2).map(|w| (fnv1a(w) % b) as usize));
        f
    }

    fn hidden(&self, feats: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        if feats.is_empty() {
            return h;
        }
        for &f in feats {
            for (hk, ek) in h.iter_mut().zip(&self.emb[f * self.dim..(f + 1) * self.dim]) {
                *hk += ek;
            }
        }
        let n = feats.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    fn scores(&self, h: &[f64]) -> Vec<f64> {
        let mut s = self.out_b.clone();
        for (c, sc) in s.iter_mut().enumerate() {
            *sc += h.iter().zip(&self.out_w[c * self.dim..(c + 1) * self.dim]).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in s.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        s.iter_mut().for_each(|v| *v /= total);
        s
    }

    pub fn train(examples: &[(String, usize)], classes: usize, cfg: &ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / cfg.dim as f64;
        let mut model = Self {
            dim: cfg.dim,
            buckets: cfg.buckets,
            classes,
            emb: (0..cfg.buckets * cfg.dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            out_w: vec![0.0; classes * cfg.dim],
            out_b: vec![0.0; classes],
        };
        let feats: Vec<Vec<usize>> = examples.iter().map(|(t, _)| model.features(t)).collect();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let total_steps = (cfg.epochs * examples.len()).max(1) as f64;
        let mut step = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                // Linearly decaying learning rate, as in fastText.
                let lr = cfg.lr * (1.0 - step / total_steps);
                step += 1.0;
                let f = &feats[i];
                if f.is_empty() {
                    continue;
                }
                let h = model.hidden(f);
                let p = model.scores(&h);
                let mut grad_h = vec![0.0; model.dim];
                for c in 0..classes {
                    let g = p[c] - if c == examples[i].1 { 1.0 } else { 0.0 };
                    for k in 0..model.dim {
                        grad_h[k] += g * model.out_w[c * model.dim + k];
                        model.out_w[c * model.dim + k] -= lr * g * h[k];
                    }
                    model.out_b[c] -= lr * g;
                }
                let scale = lr / f.len() as f64;
                for &b in f {
                    for k in 0..model.dim {
                        model.emb[b * model.dim + k] -= scale * grad_h[k];
                    }
                }
            }
        }
        model
    }

    pub fn probs(&self, text: &str) -> Vec<f64> {
        let h = self.hidden(&self.features(text));
        self.scores(&h)
    }

    pub fn predict(&self, text: &str) -> usize {
        let p = self.probs(text);
        (0..self.classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }

    /// Percentage of `texts` predicted as the paired label.
    pub fn accuracy<S: AsRef<str>>(&self, texts: &[S], labels: &[usize]) -> f64 {
        if texts.is_empty() {
            return 0.0;
        }
        let hits = texts
            .iter()
            .zip(labels)
            .filter(|(t, &l)| self.predict(t.as_ref()) == l)
            .count();
        100.0 * hits as f64 / texts.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_a_keyword_task() {
        let mut data = Vec::new();
        for i in 0..40 {
            let filler = ["x", "y", "z", "w"][i % 4];
            data.push((format!("{filler} good {filler}"), 1));
            data.push((format!("{filler} bad {filler}"), 0));
        }
        let c = StyleClassifier::train(&data, 2, &ClassifierConfig::default());
        let (t, l): (Vec<String>, Vec<usize>) = data.into_iter().unzip();
        assert_eq!(c.accuracy(&t, &l), 100.0);
        let p = c.probs("x good");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
