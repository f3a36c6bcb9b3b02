//! Dirichlet non-IID partitioning.
//!
//! For each class, client shares are drawn from Dirichlet(alpha * 1_K) and
//! the class's samples are dealt out by largest-remainder rounding. Small
//! alpha concentrates classes on few clients; large alpha approaches a
//! uniform split. Draws that leave any client under `min_per_client` are
//! redrawn with an attempt-salted stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Gamma};

use crate::data::{compute_norm_stats, write_split, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::rng::{shuffle, stream};

#[derive(Clone, Debug)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f32,
    pub seed: u64,
    pub min_per_client: usize,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "Dirichlet alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.min_per_client < 1 {
            return Err(Error::Config("min_per_client must be >= 1".into()));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: u64 = 100;

/// Disjoint exact cover of `0..labels.len()` into `num_clients` index lists.
pub fn partition_dirichlet(labels: &[u8], cfg: &PartitionConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let k = cfg.num_clients;
    if labels.len() < k {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {k} clients",
            labels.len()
        )));
    }
    // Class -> indices, in ascending class order for determinism.
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream(cfg.seed).tag("partition").idx(attempt).rng();
        let gamma = Gamma::<f64>::new(cfg.alpha as f64, 1.0)
            .map_err(|e| Error::Config(format!("bad alpha: {e}")))?;
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut degenerate = false;
        for indices in by_class.values() {
            let mut pool = indices.clone();
            shuffle(&mut pool, &mut rng);
            // Dirichlet via normalized Gamma draws.
            let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total.is_finite() && total > 0.0) {
                degenerate = true;
                break;
            }
            let shares: Vec<f64> = draws.iter().map(|d| d / total).collect();
            // Largest-remainder rounding of shares * n_c.
            let n_c = pool.len();
            let quotas: Vec<f64> = shares.iter().map(|p| p * n_c as f64).collect();
            let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
            let assigned: usize = counts.iter().sum();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                let fa = quotas[a] - quotas[a].floor();
                let fb = quotas[b] - quotas[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for &c in order.iter().take(n_c - assigned) {
                counts[c] += 1;
            }
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                clients[client].extend_from_slice(&pool[cursor..cursor + count]);
                cursor += count;
            }
        }
        if degenerate {
            continue;
        }
        if clients.iter().all(|c| c.len() >= cfg.min_per_client) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(clients);
        }
    }
    Err(Error::Partition(format!(
        "no draw satisfied min_per_client={} in {MAX_ATTEMPTS} attempts; \
         try a larger alpha or fewer clients",
        cfg.min_per_client
    )))
}

/// Everything `partition_to_dir` wrote, for inspection and tests.
#[derive(Clone, Debug)]
pub struct PartitionOutput {
    pub client_manifests: Vec<DatasetManifest>,
    pub test_manifest: DatasetManifest,
    pub train_all_manifest: DatasetManifest,
    /// Per-client histogram over the six classes.
    pub client_histograms: Vec<[usize; 6]>,
}

pub const DEFAULT_TEST_FRACTION: f32 = 0.2;

/// Carve a seeded global test split, Dirichlet-partition the remainder on
/// the class labels, and write one blob+manifest per client plus the shared
/// test split, the pooled training split, and a per-client class histogram
/// summary. Normalization statistics come from the full training split and
/// are stored in every manifest.
pub fn partition_to_dir(
    dataset: &Dataset,
    cfg: &PartitionConfig,
    test_fraction: f32,
    out_dir: &Path,
) -> Result<PartitionOutput> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0,1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut stream(cfg.seed).tag("testsplit").rng());
    let n_test = (n as f64 * test_fraction as f64).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);

    let test_set = dataset.subset(test_idx);
    let train_all = dataset.subset(train_idx);
    let stats = compute_norm_stats(&train_all);

    let train_labels = train_all.labels();
    let parts = partition_dirichlet(&train_labels, cfg)?;

    fs::create_dir_all(out_dir)?;
    let test_manifest = write_split(out_dir, "test", &test_set, &stats)?;
    let train_all_manifest = write_split(out_dir, "train_all", &train_all, &stats)?;
    let mut client_manifests = Vec::with_capacity(cfg.num_clients);
    let mut client_histograms = Vec::with_capacity(cfg.num_clients);
    let mut summary = String::from("client,good,moderate,usg,unhealthy,very_unhealthy,hazardous,total\n");
    for (i, part) in parts.iter().enumerate() {
        let shard = train_all.subset(part);
        let hist = shard.class_histogram();
        summary.push_str(&format!(
            "client_{i},{},{},{},{},{},{},{}\n",
            hist[0],
            hist[1],
            hist[2],
            hist[3],
            hist[4],
            hist[5],
            shard.len()
        ));
        client_manifests.push(write_split(out_dir, &format!("client_{i}"), &shard, &stats)?);
        client_histograms.push(hist);
    }
    fs::write(out_dir.join("partition_summary.csv"), summary)?;
    Ok(PartitionOutput {
        client_manifests,
        test_manifest,
        train_all_manifest,
        client_histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn balanced_labels(n_per_class: usize) -> Vec<u8> {
        let mut labels = Vec::new();
        for c in 0..6u8 {
            labels.extend(std::iter::repeat_n(c, n_per_class));
        }
        labels
    }

    fn assert_exact_cover(parts: &[Vec<usize>], n: usize) {
        let mut seen = vec![false; n];
        for part in parts {
            for &i in part {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "not all indices covered");
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(10);
        let cfg = PartitionConfig {
            num_clients: 1,
            alpha: 0.3,
            seed: 1,
            min_per_client: 1,
        };
        let parts = partition_dirichlet(&labels, &cfg).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), labels.len());
    }

    #[test]
    fn disjoint_exact_cover() {
        let labels = balanced_labels(100);
        let cfg = PartitionConfig {
            num_clients: 6,
            alpha: 0.5,
            seed: 7,
            min_per_client: 1,
        };
        let parts = partition_dirichlet(&labels, &cfg).unwrap();
        assert_eq!(parts.len(), 6);
        assert_exact_cover(&parts, labels.len());
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let labels = balanced_labels(1000);
        let cfg = PartitionConfig {
            num_clients: 6,
            alpha: 1e6,
            seed: 3,
            min_per_client: 1,
        };
        let parts = partition_dirichlet(&labels, &cfg).unwrap();
        for part in &parts {
            let total = part.len() as f64;
            let mut counts = [0usize; 6];
            for &i in part {
                counts[labels[i] as usize] += 1;
            }
            for c in counts {
                let prop = c as f64 / total;
                assert!(
                    (prop - 1.0 / 6.0).abs() < 0.02,
                    "class proportion {prop} too far from uniform"
                );
            }
        }
    }

    #[test]
    fn heterogeneity_grows_as_alpha_shrinks() {
        let labels = balanced_labels(1000);
        let ratio_at = |alpha: f32| -> f64 {
            let mut total = 0.0;
            for seed in 0..50u64 {
                let cfg = PartitionConfig {
                    num_clients: 6,
                    alpha,
                    seed,
                    min_per_client: 1,
                };
                let parts = partition_dirichlet(&labels, &cfg).unwrap();
                let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
                let max = *sizes.iter().max().unwrap() as f64;
                let min = (*sizes.iter().min().unwrap()).max(1) as f64;
                total += max / min;
            }
            total / 50.0
        };
        let skewed = ratio_at(0.1);
        let uniform = ratio_at(10.0);
        assert!(
            skewed > uniform,
            "mean max/min ratio at alpha=0.1 ({skewed}) should exceed alpha=10 ({uniform})"
        );
    }

    #[test]
    fn determinism_per_seed() {
        let labels = balanced_labels(50);
        let cfg = PartitionConfig {
            num_clients: 4,
            alpha: 0.5,
            seed: 11,
            min_per_client: 1,
        };
        assert_eq!(
            partition_dirichlet(&labels, &cfg).unwrap(),
            partition_dirichlet(&labels, &cfg).unwrap()
        );
    }

    #[test]
    fn impossible_constraint_reports_partition_error() {
        let labels = balanced_labels(2); // 12 samples
        let cfg = PartitionConfig {
            num_clients: 6,
            alpha: 0.01,
            seed: 1,
            min_per_client: 3, // needs 18 samples; cannot be satisfied
        };
        let err = partition_dirichlet(&labels, &cfg).unwrap_err();
        assert!(matches!(err, Error::Partition(_)), "{err}");
        assert!(err.to_string().contains("alpha"));
    }

    #[test]
    fn rejects_bad_config() {
        let labels = balanced_labels(10);
        for cfg in [
            PartitionConfig {
                num_clients: 0,
                alpha: 0.5,
                seed: 0,
                min_per_client: 1,
            },
            PartitionConfig {
                num_clients: 2,
                alpha: 0.0,
                seed: 0,
                min_per_client: 1,
            },
        ] {
            assert!(partition_dirichlet(&labels, &cfg).is_err());
        }
    }

    #[test]
    fn partition_to_dir_writes_all_files() {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 300,
            d_tab: 6,
            d_img: 8,
            noise: 0.3,
            seed: 4,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PartitionConfig {
            num_clients: 3,
            alpha: 0.5,
            seed: 2,
            min_per_client: 1,
        };
        let out = partition_to_dir(&ds, &cfg, 0.2, dir.path()).unwrap();
        assert_eq!(out.client_manifests.len(), 3);
        assert_eq!(out.test_manifest.n, 60);
        assert_eq!(out.train_all_manifest.n, 240);
        let client_total: usize = out.client_manifests.iter().map(|m| m.n).sum();
        assert_eq!(client_total, 240);
        assert!(dir.path().join("partition_summary.csv").exists());
        assert!(dir.path().join("client_0.manifest").exists());
        assert!(dir.path().join("test.bin").exists());
        // Stats shared across manifests.
        assert_eq!(out.test_manifest.stats, out.client_manifests[0].stats);
    }
}
