//! Owner mode: the provider-side view of the vault.
//!
//! Unlocked with the build seed. Everything the white-box baselines need
//! lives here: direct parameter reads/writes and the trainable-set
//! definitions for full and last-layers fine-tuning. Edits go through this
//! handle, so sealed-mode checksums always reflect them.

use super::{Param, Scalar, VaultError, VaultModel, BLOCKS};
use crate::tensor::Tensor;

pub struct WhiteBoxHandle<'a, T: Scalar> {
    vault: &'a mut VaultModel<T>,
}

impl<'a, T: Scalar> WhiteBoxHandle<'a, T> {
    pub(super) fn new(vault: &'a mut VaultModel<T>) -> Self {
        WhiteBoxHandle { vault }
    }

    pub fn vault(&self) -> &VaultModel<T> {
        self.vault
    }

    pub fn params(&self) -> &[Param<T>] {
        self.vault.params()
    }

    pub fn param(&self, idx: usize) -> &Tensor<T> {
        &self.vault.params()[idx].value
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.vault
            .params()
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn set_param(&mut self, idx: usize, value: Tensor<T>) -> Result<(), VaultError> {
        let current = &self.vault.params()[idx].value;
        if current.dims() != value.dims() {
            return Err(VaultError::EntryShape {
                entry: "owner set_param",
                expected: format!("{:?}", current.dims()),
                got: value.dims().to_vec(),
            });
        }
        self.vault.params_mut()[idx].value = value;
        Ok(())
    }

    /// Every parameter index except the frozen temperature: the full
    /// fine-tuning set.
    pub fn full_trainable(&self) -> Vec<usize> {
        (0..self.vault.params().len())
            .filter(|&i| i != self.vault.temp)
            .collect()
    }

    /// Last-layers set: the final `n` transformer blocks plus the output
    /// projection of each encoder. At the `n == 4` boundary this widens to
    /// the full fine-tuning set (training every block subsumes the input
    /// stages; the two methods coincide there).
    pub fn last_layers_trainable(&self, n: usize) -> Vec<usize> {
        assert!(n >= 1 && n <= BLOCKS, "last-layers n must be in 1..=4");
        if n == BLOCKS {
            return self.full_trainable();
        }
        let mut names: Vec<String> = Vec::new();
        for enc in ["vis", "txt"] {
            for blk in BLOCKS - n..BLOCKS {
                names.push(format!("{enc}.blk{blk}."));
            }
            names.push(format!("{enc}.proj."));
        }
        self.vault
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| names.iter().any(|prefix| p.name.starts_with(prefix)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.vault.checksum()
    }
}
