//! Synthetic dataset generation.
//!
//! Real editing corpora are text; at desk scale the separability of the
//! data has to be controlled instead of learned, so the generator works
//! directly in embedding space and emits an embedding table alongside the
//! records. Edit embeddings are mutually orthogonal (when the dimension
//! allows), rephrases are small perturbations of their edit, and
//! irrelevant probes are either exactly orthogonal to every edit or hold a
//! controlled similarity to one of them.

use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::harness::{EditRecord, PromptAnswer};

/// How irrelevant probes relate to the edit set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IrrelevantKind {
    /// Zero similarity to every edit; routing can never activate on them.
    Orthogonal,
    /// Similarity to one randomly chosen edit drawn uniformly from
    /// [sim_lo, sim_hi]; used for threshold sweeps.
    Noisy { sim_lo: f64, sim_hi: f64 },
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_edits: usize,
    pub rephrases_per_edit: usize,
    /// L2 magnitude of the rephrase perturbation before renormalization.
    pub sigma: f64,
    pub dim: usize,
    pub vocab_size: usize,
    pub irrelevant: IrrelevantKind,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_edits: 200,
            rephrases_per_edit: 2,
            sigma: 0.05,
            dim: 256,
            vocab_size: 32,
            irrelevant: IrrelevantKind::Orthogonal,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub records: Vec<EditRecord>,
    pub table: EmbeddingTable,
    pub vocab: Vec<String>,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_vec((0..dim).map(|_| rng.random_range(-1.0f64..1.0)).collect());
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Remove the components of `v` along each (orthonormal) basis vector.
fn project_out(v: &mut Array1<f64>, basis: &[Array1<f64>]) {
    for b in basis {
        let coef = v.dot(b);
        v.scaled_add(-coef, b);
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    if config.n_edits == 0 {
        return Err(Error::InvalidInput("n_edits must be >= 1".into()));
    }
    if config.rephrases_per_edit == 0 {
        return Err(Error::InvalidInput("rephrases_per_edit must be >= 1".into()));
    }
    if config.vocab_size == 0 {
        return Err(Error::InvalidInput("vocab_size must be >= 1".into()));
    }
    if config.sigma < 0.0 {
        return Err(Error::InvalidInput("sigma must be non-negative".into()));
    }
    if let IrrelevantKind::Noisy { sim_lo, sim_hi } = config.irrelevant {
        if !(0.0..=1.0).contains(&sim_lo) || !(0.0..=1.0).contains(&sim_hi) || sim_lo > sim_hi {
            return Err(Error::InvalidInput(format!(
                "noisy similarity range [{sim_lo}, {sim_hi}] must satisfy 0 <= lo <= hi <= 1"
            )));
        }
    }
    let exact_span = config.n_edits < config.dim;
    if matches!(config.irrelevant, IrrelevantKind::Orthogonal) && !exact_span {
        return Err(Error::InvalidInput(format!(
            "orthogonal irrelevants need dim > n_edits (got dim {} for {} edits)",
            config.dim, config.n_edits
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab: Vec<String> = (0..config.vocab_size)
        .map(|i| format!("ans{i:02}"))
        .collect();

    // Edit directions: orthonormal while the dimension allows, random unit
    // vectors beyond that.
    let mut edit_vectors: Vec<Array1<f64>> = Vec::with_capacity(config.n_edits);
    for _ in 0..config.n_edits {
        loop {
            let mut v = random_direction(&mut rng, config.dim);
            if exact_span {
                project_out(&mut v, &edit_vectors);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                edit_vectors.push(v / norm);
                break;
            }
        }
    }

    let mut table = EmbeddingTable::new(config.dim);
    let mut records = Vec::with_capacity(config.n_edits);
    for (i, edit_vector) in edit_vectors.iter().enumerate() {
        let edit_key = format!("edit-{i:04}");
        table.insert(&edit_key, edit_vector.clone())?;

        let mut rephrases = Vec::with_capacity(config.rephrases_per_edit);
        for r in 0..config.rephrases_per_edit {
            let key = format!("{edit_key}-r{r:02}");
            let perturbation = random_direction(&mut rng, config.dim);
            let mut v = edit_vector.clone();
            v.scaled_add(config.sigma, &perturbation);
            table.insert(&key, v)?;
            rephrases.push(key);
        }

        let irr_key = format!("irr-{i:04}");
        let irr_vector = match config.irrelevant {
            IrrelevantKind::Orthogonal => loop {
                let mut v = random_direction(&mut rng, config.dim);
                project_out(&mut v, &edit_vectors);
                let norm = v.dot(&v).sqrt();
                if norm > 1e-6 {
                    break v / norm;
                }
            },
            IrrelevantKind::Noisy { sim_lo, sim_hi } => {
                let target = rng.random_range(0..config.n_edits);
                let sim = rng.random_range(sim_lo..=sim_hi);
                let mut residual = loop {
                    let mut v = random_direction(&mut rng, config.dim);
                    if exact_span {
                        project_out(&mut v, &edit_vectors);
                    } else {
                        let coef = v.dot(&edit_vectors[target]);
                        v.scaled_add(-coef, &edit_vectors[target]);
                    }
                    let norm = v.dot(&v).sqrt();
                    if norm > 1e-6 {
                        break v / norm;
                    }
                };
                residual *= (1.0 - sim * sim).sqrt();
                residual.scaled_add(sim, &edit_vectors[target]);
                residual
            }
        };
        table.insert(&irr_key, irr_vector)?;

        records.push(EditRecord {
            edit: PromptAnswer {
                prompt: edit_key.clone(),
                answer: vocab[rng.random_range(0..vocab.len())].clone(),
            },
            rephrases,
            locality: PromptAnswer {
                prompt: irr_key,
                answer: vocab[rng.random_range(0..vocab.len())].clone(),
            },
        });
    }

    Ok(SynthData {
        records,
        table,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::similarity;

    #[test]
    fn separable_edits_are_orthogonal() {
        let config = SynthConfig {
            n_edits: 12,
            dim: 32,
            seed: 3,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        assert_eq!(data.records.len(), 12);
        for i in 0..12 {
            let a = data.table.get(&format!("edit-{i:04}")).unwrap();
            for j in (i + 1)..12 {
                let b = data.table.get(&format!("edit-{j:04}")).unwrap();
                assert!(similarity(a, b).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn rephrases_stay_close_to_their_edit() {
        let config = SynthConfig {
            n_edits: 8,
            dim: 64,
            sigma: 0.05,
            seed: 9,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        for record in &data.records {
            let edit = data.table.get(&record.edit.prompt).unwrap();
            for rephrase in &record.rephrases {
                let r = data.table.get(rephrase).unwrap();
                assert!(similarity(edit, r).unwrap() > 0.99);
            }
        }
    }

    #[test]
    fn orthogonal_irrelevants_have_zero_similarity_to_all_edits() {
        let config = SynthConfig {
            n_edits: 10,
            dim: 24,
            seed: 4,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        for record in &data.records {
            let irr = data.table.get(&record.locality.prompt).unwrap();
            for other in &data.records {
                let edit = data.table.get(&other.edit.prompt).unwrap();
                assert!(similarity(irr, edit).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn noisy_irrelevants_land_in_the_requested_band() {
        let config = SynthConfig {
            n_edits: 10,
            dim: 48,
            irrelevant: IrrelevantKind::Noisy {
                sim_lo: 0.3,
                sim_hi: 0.7,
            },
            seed: 8,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        for record in &data.records {
            let irr = data.table.get(&record.locality.prompt).unwrap();
            let max_sim = data
                .records
                .iter()
                .map(|other| {
                    let edit = data.table.get(&other.edit.prompt).unwrap();
                    similarity(irr, edit).unwrap()
                })
                .fold(0.0f64, f64::max);
            assert!(
                (0.3 - 1e-9..=0.7 + 1e-9).contains(&max_sim),
                "max similarity {max_sim} outside band"
            );
        }
    }

    #[test]
    fn orthogonal_needs_enough_dimensions() {
        let config = SynthConfig {
            n_edits: 32,
            dim: 32,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&config), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let config = SynthConfig {
            n_edits: 6,
            dim: 16,
            seed: 77,
            ..SynthConfig::default()
        };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn answers_come_from_the_vocab() {
        let config = SynthConfig {
            n_edits: 20,
            dim: 40,
            vocab_size: 5,
            seed: 2,
            ..SynthConfig::default()
        };
        let data = generate(&config).unwrap();
        for record in &data.records {
            assert!(data.vocab.contains(&record.edit.answer));
            assert!(data.vocab.contains(&record.locality.answer));
        }
    }
}
