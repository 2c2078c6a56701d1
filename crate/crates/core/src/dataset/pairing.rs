use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::labels::{Class, Modality, NUM_CLASSES};

/// Number of same-class (CFP, OCT) pairs: `sum_c N_cfp(c) * N_oct(c)`.
pub fn loose_pair_count(records: &[ImageRecord]) -> u128 {
    super::class_counts(records)
        .iter()
        .map(|[cfp, oct]| *cfp as u128 * *oct as u128)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// At least one endpoint synthetic.
    Pretrain,
    /// Both endpoints real.
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoosePair<'a> {
    pub cfp: &'a ImageRecord,
    pub oct: &'a ImageRecord,
    pub label: Class,
}

#[derive(Clone, Debug, Default)]
struct Pool<'a> {
    real_cfp: Vec<&'a ImageRecord>,
    syn_cfp: Vec<&'a ImageRecord>,
    real_oct: Vec<&'a ImageRecord>,
    syn_oct: Vec<&'a ImageRecord>,
}

impl<'a> Pool<'a> {
    fn admissible(&self, mode: PairMode) -> u128 {
        let n = |v: &Vec<_>| v.len() as u128;
        match mode {
            PairMode::Finetune => n(&self.real_cfp) * n(&self.real_oct),
            PairMode::Pretrain => {
                n(&self.syn_cfp) * (n(&self.real_oct) + n(&self.syn_oct)) + n(&self.real_cfp) * n(&self.syn_oct)
            }
        }
    }

    /// Uniform draw from the admissible set, split into disjoint blocks
    /// (synthetic CFP x any OCT, then real CFP x synthetic OCT).
    fn draw(&self, mode: PairMode, label: Class, rng: &mut impl Rng) -> LoosePair<'a> {
        let total = self.admissible(mode);
        let u = rng.gen_range(0..total);
        let (cfp, oct) = match mode {
            PairMode::Finetune => {
                let k = self.real_oct.len() as u128;
                (self.real_cfp[(u / k) as usize], self.real_oct[(u % k) as usize])
            }
            PairMode::Pretrain => {
                let all_oct = (self.real_oct.len() + self.syn_oct.len()) as u128;
                let first = self.syn_cfp.len() as u128 * all_oct;
                if u < first {
                    let j = (u % all_oct) as usize;
                    let oct = if j < self.real_oct.len() {
                        self.real_oct[j]
                    } else {
                        self.syn_oct[j - self.real_oct.len()]
                    };
                    (self.syn_cfp[(u / all_oct) as usize], oct)
                } else {
                    let v = u - first;
                    let k = self.syn_oct.len() as u128;
                    (self.real_cfp[(v / k) as usize], self.syn_oct[(v % k) as usize])
                }
            }
        };
        LoosePair { cfp, oct, label }
    }
}

/// Lazy uniform sampler over the admissible loose pairs of each class.
#[derive(Clone, Debug)]
pub struct LoosePairSampler<'a> {
    mode: PairMode,
    pools: Vec<Pool<'a>>,
}

impl<'a> LoosePairSampler<'a> {
    /// Fails, naming the class, if any of `required` has no admissible pair.
    pub fn new(records: &'a [ImageRecord], mode: PairMode, required: &[Class]) -> Result<Self> {
        let mut pools = vec![Pool::default(); NUM_CLASSES];
        for r in records {
            let p = &mut pools[r.label.index()];
            let bucket = match (r.modality, r.is_real()) {
                (Modality::Cfp, true) => &mut p.real_cfp,
                (Modality::Cfp, false) => &mut p.syn_cfp,
                (Modality::Oct, true) => &mut p.real_oct,
                (Modality::Oct, false) => &mut p.syn_oct,
            };
            bucket.push(r);
        }
        let sampler = Self { mode, pools };
        for &c in required {
            if sampler.admissible_count(c) == 0 {
                return Err(Error::Class {
                    class: c.name().into(),
                    message: format!("no admissible {mode:?} pairs"),
                });
            }
        }
        Ok(sampler)
    }

    /// Classes that contain synthetic images, i.e. those pre-training can cover.
    pub fn synthetic_classes(records: &[ImageRecord]) -> Vec<Class> {
        Class::ALL
            .into_iter()
            .filter(|&c| records.iter().any(|r| r.label == c && !r.is_real()))
            .collect()
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    pub fn admissible_count(&self, class: Class) -> u128 {
        self.pools[class.index()].admissible(self.mode)
    }

    pub fn sample_class(&self, class: Class, rng: &mut impl Rng) -> Result<LoosePair<'a>> {
        if self.admissible_count(class) == 0 {
            return Err(Error::Class {
                class: class.name().into(),
                message: format!("no admissible {:?} pairs", self.mode),
            });
        }
        Ok(self.pools[class.index()].draw(self.mode, class, rng))
    }

    /// Uniform draw over the union of all classes' admissible pairs.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<LoosePair<'a>> {
        let total: u128 = Class::ALL.iter().map(|&c| self.admissible_count(c)).sum();
        if total == 0 {
            return Err(Error::contract(format!(
                "no admissible {:?} pairs in any class",
                self.mode
            )));
        }
        let mut u = rng.gen_range(0..total);
        for c in Class::ALL {
            let n = self.admissible_count(c);
            if u < n {
                return self.sample_class(c, rng);
            }
            u -= n;
        }
        unreachable!("u < total")
    }

    /// `batch_size / 4` pairs of each class in `classes`, in class order.
    pub fn balanced_batch(
        &self,
        classes: &[Class],
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<LoosePair<'a>>> {
        let per_class = per_class(batch_size)?;
        let mut out = Vec::with_capacity(per_class * classes.len());
        for &c in classes {
            for _ in 0..per_class {
                out.push(self.sample_class(c, rng)?);
            }
        }
        Ok(out)
    }
}

fn per_class(batch_size: usize) -> Result<usize> {
    if batch_size == 0 || batch_size % NUM_CLASSES != 0 {
        return Err(Error::contract(format!(
            "batch size {batch_size} is not a positive multiple of {NUM_CLASSES}"
        )));
    }
    Ok(batch_size / NUM_CLASSES)
}

/// Class-balanced batches of single images: each class keeps a shuffled
/// queue that is reshuffled whenever it runs out.
#[derive(Clone, Debug)]
pub struct BalancedSampler<'a> {
    queues: Vec<(Vec<&'a ImageRecord>, usize)>,
    per_class: usize,
}

impl<'a> BalancedSampler<'a> {
    pub fn new(records: &'a [ImageRecord], batch_size: usize) -> Result<Self> {
        let per_class = per_class(batch_size)?;
        let mut queues = vec![(Vec::new(), 0); NUM_CLASSES];
        for r in records {
            queues[r.label.index()].0.push(r);
        }
        for (c, (q, _)) in queues.iter().enumerate() {
            if q.is_empty() {
                return Err(Error::Class {
                    class: Class::ALL[c].name().into(),
                    message: "no images to sample a balanced batch from".into(),
                });
            }
        }
        for (q, pos) in &mut queues {
            *pos = q.len();
        }
        Ok(Self { queues, per_class })
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Vec<&'a ImageRecord> {
        let mut out = Vec::with_capacity(self.per_class * NUM_CLASSES);
        for (q, pos) in &mut self.queues {
            for _ in 0..self.per_class {
                if *pos == q.len() {
                    q.shuffle(rng);
                    *pos = 0;
                }
                out.push(q[*pos]);
                *pos += 1;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::rec;
    use crate::labels::Provenance;
    use crate::seed;

    #[test]
    fn counting_examples() {
        let mut r = Vec::new();
        for i in 0..2 {
            r.push(rec(&format!("f{i}"), "e", Modality::Cfp, Class::Pcv, Provenance::Real));
        }
        for i in 0..3 {
            r.push(rec(&format!("o{i}"), "e", Modality::Oct, Class::Pcv, Provenance::Real));
        }
        assert_eq!(loose_pair_count(&r), 6);
        r.push(rec("g", "x", Modality::Cfp, Class::Normal, Provenance::Real));
        assert_eq!(loose_pair_count(&r), 6);
        for i in 0..4 {
            r.push(rec(
                &format!("n{i}"),
                "x",
                Modality::Oct,
                Class::Normal,
                Provenance::Real,
            ));
        }
        assert_eq!(loose_pair_count(&r), 10);
    }

    #[test]
    fn finetune_on_synthetic_only_fails() {
        let r = vec![
            rec("a", "e", Modality::Cfp, Class::DryAmd, Provenance::Synthetic),
            rec("b", "e", Modality::Oct, Class::DryAmd, Provenance::Synthetic),
        ];
        let err = LoosePairSampler::new(&r, PairMode::Finetune, &[Class::DryAmd]).unwrap_err();
        assert!(err.to_string().contains("dryAMD"));
        assert!(LoosePairSampler::new(&r, PairMode::Pretrain, &[Class::DryAmd]).is_ok());
    }

    #[test]
    fn batch_size_must_divide_by_four() {
        let r = vec![rec("a", "e", Modality::Cfp, Class::DryAmd, Provenance::Real)];
        assert!(BalancedSampler::new(&r, 6).is_err());
        assert!(BalancedSampler::new(&r, 8).unwrap_err().to_string().contains("normal"));
    }

    #[test]
    fn balanced_batches_cycle_every_image() {
        let mut r = Vec::new();
        for c in Class::ALL {
            for i in 0..3 {
                r.push(rec(
                    &format!("{c}{i}"),
                    &format!("{c}{i}"),
                    Modality::Oct,
                    c,
                    Provenance::Real,
                ));
            }
        }
        let mut s = BalancedSampler::new(&r, 4).unwrap();
        let mut rng = seed::rng(0, &[]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..3 {
            let b = s.next_batch(&mut rng);
            assert_eq!(b.iter().map(|r| r.label).collect::<Vec<_>>(), Class::ALL.to_vec());
            seen.extend(b.iter().map(|r| r.image_id.clone()));
        }
        assert_eq!(seen.len(), 12);
    }
}
