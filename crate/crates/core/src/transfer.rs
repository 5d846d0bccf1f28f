//! Row splicing between checkpoints and row masks for partial tuning.

use std::collections::BTreeSet;

use crate::checkpoint::{validate_pair, Checkpoint};
use crate::error::{Error, Result};
use crate::selection::WinningTicketSet;

/// Which rows of an embedding may be updated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMask {
    pub trainable: Vec<bool>,
}

impl RowMask {
    pub fn all(vocab_size: usize, trainable: bool) -> Self {
        RowMask {
            trainable: vec![trainable; vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_trainable(&self, row: usize) -> bool {
        self.trainable[row]
    }
}

fn check_tickets(tickets: &WinningTicketSet, vocab_size: usize) -> Result<()> {
    tickets.validate()?;
    if tickets.vocab_size != vocab_size {
        return Err(Error::invalid(format!(
            "ticket set is for {} rows, tensor has {vocab_size}",
            tickets.vocab_size
        )));
    }
    Ok(())
}

/// Copy of `base` whose ticket rows in `tensor_name` are taken byte-for-byte
/// from `tuned`. Every other tensor and row is left exactly as in `base`.
pub fn splice_partial_transfer(
    base: &Checkpoint,
    tuned: &Checkpoint,
    tensor_name: &str,
    tickets: &WinningTicketSet,
) -> Result<Checkpoint> {
    let (vocab_size, dim) = validate_pair(base, tuned, tensor_name)?;
    check_tickets(tickets, vocab_size)?;
    let source = &tuned.tensor(tensor_name)?.data;
    let mut out = base.clone();
    let target = &mut out.get_mut(tensor_name).expect("validated above").data;
    for &row in &tickets.token_ids {
        target[row * dim..(row + 1) * dim].copy_from_slice(&source[row * dim..(row + 1) * dim]);
    }
    Ok(out)
}

/// `trainable[i] = (i in tickets) XOR complement`.
pub fn emit_mask(tickets: &WinningTicketSet, complement: bool) -> Result<RowMask> {
    tickets.validate()?;
    let trainable = tickets
        .membership()
        .into_iter()
        .map(|member| member != complement)
        .collect();
    Ok(RowMask { trainable })
}

/// Rows of `tensor_name` whose stored bytes differ between `a` and `b`.
pub fn diff_rows(a: &Checkpoint, b: &Checkpoint, tensor_name: &str) -> Result<BTreeSet<usize>> {
    let (_, dim) = validate_pair(a, b, tensor_name)?;
    let left = &a.tensor(tensor_name)?.data;
    let right = &b.tensor(tensor_name)?.data;
    Ok(left
        .chunks_exact(dim)
        .zip(right.chunks_exact(dim))
        .enumerate()
        .filter(|(_, (l, r))| l.iter().zip(*r).any(|(x, y)| x.to_bits() != y.to_bits()))
        .map(|(i, _)| i)
        .collect())
}
