use std::sync::Arc;

/// Which keys each query may attend to, `allow[q * keys + k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub queries: usize,
    pub keys: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allow: vec![true; queries * keys],
        }
    }

    /// Query `i` sits at absolute position `offset + i` among the keys and
    /// sees keys `0..=offset + i`.
    pub fn causal(queries: usize, offset: usize) -> Self {
        let keys = offset + queries;
        let allow = (0..queries)
            .flat_map(|q| (0..keys).map(move |k| k <= offset + q))
            .collect();
        Self { queries, keys, allow }
    }

    /// Square mask letting tokens attend only within their own block.
    pub fn block_diagonal(block_sizes: &[usize]) -> Self {
        let block_of: Vec<usize> = block_sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| std::iter::repeat_n(b, n))
            .collect();
        let n = block_of.len();
        let allow = (0..n)
            .flat_map(|q| {
                let block_of = &block_of;
                (0..n).map(move |k| block_of[q] == block_of[k])
            })
            .collect();
        Self {
            queries: n,
            keys: n,
            allow,
        }
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.keys + k]
    }

    /// Complement, in the form the masked-fill primitive consumes.
    pub fn blocked(&self) -> Arc<[bool]> {
        self.allow.iter().map(|&a| !a).collect()
    }
}
