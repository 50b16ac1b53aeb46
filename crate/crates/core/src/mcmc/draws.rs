use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ChainOutput, McmcError, Result, SamplerConfig};

/// Kept posterior draws, one row-major `iterations x parameters` matrix per chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draws {
    names: Vec<String>,
    chains: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate per chain and coordinate (zero for
    /// columns that were never sampled).
    pub acceptance: Vec<Vec<f64>>,
    /// Master seed; chain `c` used ChaCha stream `c` of it.
    pub seed: u64,
    pub thin: usize,
}

impl Draws {
    pub(crate) fn from_chains(names: Vec<String>, outputs: Vec<ChainOutput>, config: &SamplerConfig) -> Self {
        let (chains, acceptance) = outputs.into_iter().map(|o| (o.values, o.acceptance)).unzip();
        Self {
            names,
            chains,
            acceptance,
            seed: config.seed,
            thin: config.thin,
        }
    }

    /// Builds draws from explicit per-chain matrices (used for derived quantities
    /// and tests).
    pub fn from_matrices(names: Vec<String>, chains: Vec<Vec<f64>>) -> Result<Self> {
        let width = names.len();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != width {
            return Err(McmcError::Insufficient("parameter names must be unique".into()));
        }
        let len = chains.first().map_or(0, Vec::len);
        if width == 0 || chains.iter().any(|c| c.len() != len || c.len() % width != 0) {
            return Err(McmcError::Insufficient("chains must share one shape".into()));
        }
        let acceptance = vec![vec![0.0; width]; chains.len()];
        Ok(Self {
            names,
            chains,
            acceptance,
            seed: 0,
            thin: 1,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    /// Kept iterations per chain.
    pub fn n_iterations(&self) -> usize {
        self.chains.first().map_or(0, |c| c.len() / self.names.len().max(1))
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| McmcError::UnknownParameter(name.to_string()))
    }

    /// Row `iteration` of chain `chain`.
    pub fn row(&self, chain: usize, iteration: usize) -> &[f64] {
        let w = self.names.len();
        &self.chains[chain][iteration * w..(iteration + 1) * w]
    }

    pub fn rows(&self, chain: usize) -> impl Iterator<Item = &[f64]> {
        self.chains[chain].chunks_exact(self.names.len())
    }

    /// Values of one parameter, one vector per chain.
    pub fn per_chain(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let i = self.index_of(name)?;
        Ok(self.per_chain_index(i))
    }

    pub fn per_chain_index(&self, index: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains())
            .map(|c| self.rows(c).map(|r| r[index]).collect())
            .collect()
    }

    /// Values of one parameter pooled across chains in chain order.
    pub fn pooled(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.per_chain(name)?.concat())
    }

    /// Applies `f` to every row, keeping the chain structure.
    pub fn map_rows<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<Vec<f64>> {
        (0..self.n_chains()).map(|c| self.rows(c).map(&f).collect()).collect()
    }

    /// Writes `chain,iteration,param,value` rows, chains and iterations 1-based.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| McmcError::Csv(e.to_string());
        w.write_record(["chain", "iteration", "param", "value"]).map_err(err)?;
        for c in 0..self.n_chains() {
            for (it, row) in self.rows(c).enumerate() {
                for (name, v) in self.names.iter().zip(row) {
                    w.write_record([
                        (c + 1).to_string(),
                        ((it + 1) * self.thin).to_string(),
                        name.clone(),
                        format!("{v:?}"),
                    ])
                    .map_err(err)?;
                }
            }
        }
        w.flush().map_err(|e| McmcError::Csv(e.to_string()))
    }
}
