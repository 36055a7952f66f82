//! Instance/pool pairs on disk and in memory.
//!
//! A dataset directory holds `train/`, `valid/` and `test/` splits; each split
//! stores `<name>.ipinst` next to `<name>.pool`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::encoders::GraphTensors;
use crate::error::{Error, Result};
use crate::featurize::build_bipartite;
use crate::generate::{derive_seed, generate, split_counts, Family, GeneratorConfig};
use crate::ip::{read_instance, write_instance, IpInstance};
use crate::oracle::{read_pool, solve_exact, write_pool, SolvePool};

pub const INSTANCE_EXT: &str = "ipinst";
pub const POOL_EXT: &str = "pool";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug)]
pub struct Sample {
    pub inst: IpInstance,
    /// Minimization form used by the networks and by guidance.
    pub canonical: IpInstance,
    pub graph: GraphTensors,
    pub pool: SolvePool,
}

impl Sample {
    pub fn new(inst: IpInstance, pool: SolvePool) -> Result<Self> {
        let graph = GraphTensors::from(&build_bipartite(&inst)?);
        Ok(Sample {
            canonical: inst.canonicalize(),
            inst,
            graph,
            pool,
        })
    }

    pub fn n(&self) -> usize {
        self.inst.n()
    }

    /// Optimum in the authored sense, when the pool is non-empty.
    pub fn best_objective(&self) -> Option<f64> {
        self.pool.best().map(|e| e.objective)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn from_pairs(pairs: Vec<(IpInstance, SolvePool)>) -> Result<Self> {
        let samples = pairs
            .into_iter()
            .map(|(i, p)| Sample::new(i, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_n(&self) -> usize {
        self.samples.iter().map(Sample::n).max().unwrap_or(0)
    }

    /// Fails if the dataset is empty or any pool has no solution.
    pub fn require_pools(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyData("dataset has no instances".into()));
        }
        if let Some(s) = self.samples.iter().find(|s| s.pool.is_empty()) {
            return Err(Error::EmptyData(format!(
                "instance {} has an empty solution pool",
                s.inst.name()
            )));
        }
        Ok(())
    }

    pub fn load_split(dir: impl AsRef<Path>, split: &str) -> Result<Self> {
        let dir = dir.as_ref().join(split);
        let mut names = Vec::new();
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == INSTANCE_EXT) {
                names.push(path);
            }
        }
        names.sort();
        let pairs = names
            .into_iter()
            .map(|p| {
                let inst = read_instance(&p)?;
                let pool = read_pool(p.with_extension(POOL_EXT))?;
                Ok((inst, pool))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(pairs)
    }

    pub fn save_split(&self, dir: impl AsRef<Path>, split: &str) -> Result<()> {
        let dir = dir.as_ref().join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in &self.samples {
            let base = dir.join(s.inst.name());
            write_instance(&s.inst, base.with_extension(INSTANCE_EXT))?;
            write_pool(&s.pool, base.with_extension(POOL_EXT))?;
        }
        Ok(())
    }
}

/// `count` instances with seeds derived from `seed`, solved to pools of
/// `pool_cap` in parallel. Instance `i` uses `families[i % families.len()]`.
pub fn build_dataset(families: &[Family], count: usize, seed: u64, pool_cap: usize, node_limit: u64) -> Result<Dataset> {
    if families.is_empty() {
        return Err(Error::Config("no instance family given".into()));
    }
    let pairs = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let family = &families[i as usize % families.len()];
            let inst = generate(&GeneratorConfig::new(family.clone(), derive_seed(seed, i)))?;
            let pool = solve_exact(&inst, pool_cap, node_limit);
            Ok((inst, pool))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_pairs(pairs)
}

/// Generates `total` instances and writes only the instance files of an
/// 8:1:1 split under `dir`.
pub fn generate_splits(family: &Family, total: usize, seed: u64, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let (tr, va, te) = split_counts(total);
    let mut written = Vec::with_capacity(total);
    let mut index = 0u64;
    for (split, count) in SPLITS.iter().zip([tr, va, te]) {
        let sdir = dir.as_ref().join(split);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        for _ in 0..count {
            let inst = generate(&GeneratorConfig::new(family.clone(), derive_seed(seed, index)))?;
            let path = sdir.join(inst.name()).with_extension(INSTANCE_EXT);
            write_instance(&inst, &path)?;
            written.push(path);
            index += 1;
        }
    }
    Ok(written)
}

/// Solves every instance file in each split that lacks a pool.
pub fn collect_pools(dir: impl AsRef<Path>, pool_cap: usize, node_limit: u64) -> Result<usize> {
    let mut todo = Vec::new();
    for split in SPLITS {
        let sdir = dir.as_ref().join(split);
        let Ok(entries) = fs::read_dir(&sdir) else { continue };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&sdir, e))?.path();
            if path.extension().is_some_and(|e| e == INSTANCE_EXT) && !path.with_extension(POOL_EXT).exists() {
                todo.push(path);
            }
        }
    }
    todo.sort();
    todo.par_iter()
        .map(|p| {
            let inst = read_instance(p)?;
            let pool = solve_exact(&inst, pool_cap, node_limit);
            write_pool(&pool, p.with_extension(POOL_EXT))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(todo.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = build_dataset(&[Family::desk_indep_set(8)], 3, 5, 4, 1_000_000).unwrap();
        data.save_split(dir.path(), "train").unwrap();
        let back = Dataset::load_split(dir.path(), "train").unwrap();
        assert_eq!(back.len(), 3);
        let mut a: Vec<_> = data.samples.iter().map(|s| (s.inst.clone(), s.pool.clone())).collect();
        let mut b: Vec<_> = back.samples.iter().map(|s| (s.inst.clone(), s.pool.clone())).collect();
        a.sort_by(|x, y| x.0.name().cmp(y.0.name()));
        b.sort_by(|x, y| x.0.name().cmp(y.0.name()));
        assert_eq!(a, b);
    }

    #[test]
    fn generate_then_collect() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_splits(&Family::desk_indep_set(8), 10, 1, dir.path()).unwrap();
        assert_eq!(files.len(), 10);
        assert_eq!(collect_pools(dir.path(), 3, 1_000_000).unwrap(), 10);
        assert_eq!(collect_pools(dir.path(), 3, 1_000_000).unwrap(), 0);
        assert_eq!(Dataset::load_split(dir.path(), "train").unwrap().len(), 8);
    }

    #[test]
    fn empty_pool_is_reported() {
        let data = Dataset::default();
        assert!(matches!(data.require_pools(), Err(Error::EmptyData(_))));
    }
}
