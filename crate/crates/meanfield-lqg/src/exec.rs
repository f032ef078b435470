//! Deterministic parallel execution over Monte Carlo path indices.
//!
//! Sample paths are independent, so the natural parallel unit is a contiguous
//! chunk of path indices. Each chunk folds its paths in index order into a
//! fresh accumulator; chunk accumulators are then merged in chunk order. The
//! chunking is fixed (independent of thread count), so the reduction tree is
//! identical whether the chunks are processed by rayon or by a plain loop,
//! and results are bit-for-bit reproducible in both modes.

/// How to schedule path chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Plain loop over chunks on the calling thread.
    Sequential,
    /// rayon work-stealing over chunks (requires the `parallel` feature;
    /// falls back to sequential without it).
    Parallel,
}

impl ExecMode {
    /// Default mode: parallel when compiled in, sequential otherwise.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Paths per chunk; fixed so that the merge order never depends on the
/// scheduler.
pub const CHUNK: usize = 64;

/// Folds `n_items` path indices into an accumulator.
///
/// `init` creates an empty accumulator, `step` absorbs one path index, and
/// `merge` combines two accumulators with the left argument ordered first.
pub fn fold_paths<A, I, S, M>(mode: ExecMode, n_items: usize, init: I, step: S, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(&mut A, usize) + Sync,
    M: Fn(A, A) -> A + Sync,
{
    let chunk_of = |c: usize| {
        let lo = c * CHUNK;
        let hi = ((c + 1) * CHUNK).min(n_items);
        let mut acc = init();
        for i in lo..hi {
            step(&mut acc, i);
        }
        acc
    };
    let n_chunks = n_items.div_ceil(CHUNK);

    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        let parts: Vec<A> = (0..n_chunks).into_par_iter().map(chunk_of).collect();
        return parts
            .into_iter()
            .fold(None, |acc: Option<A>, part| {
                Some(match acc {
                    None => part,
                    Some(a) => merge(a, part),
                })
            })
            .unwrap_or_else(init);
    }
    let _ = mode;

    let mut acc: Option<A> = None;
    for c in 0..n_chunks {
        let part = chunk_of(c);
        acc = Some(match acc {
            None => part,
            Some(a) => merge(a, part),
        });
    }
    acc.unwrap_or_else(init)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy_term(i: usize) -> f64 {
        // Deliberately non-associative-friendly magnitudes to expose any
        // order dependence in the reduction.
        let x = (i as f64 + 1.0).sin() * 1e8_f64.powf((i % 3) as f64 / 3.0);
        1.0 / (1.0 + x * x)
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let run = |mode| {
            fold_paths(
                mode,
                1000,
                || 0.0f64,
                |acc, i| *acc += noisy_term(i),
                |a, b| a + b,
            )
        };
        let seq = run(ExecMode::Sequential);
        let par = run(ExecMode::Parallel);
        assert_eq!(seq.to_bits(), par.to_bits());
    }

    #[test]
    fn covers_every_index_once() {
        let total: u64 = fold_paths(
            ExecMode::Sequential,
            CHUNK * 3 + 17,
            || 0u64,
            |acc, i| *acc += i as u64,
            |a, b| a + b,
        );
        let n = (CHUNK * 3 + 17) as u64;
        assert_eq!(total, n * (n - 1) / 2);
    }

    #[test]
    fn empty_input_yields_init() {
        let v: Vec<usize> = fold_paths(
            ExecMode::Parallel,
            0,
            Vec::new,
            |acc, i| acc.push(i),
            |mut a, mut b| {
                a.append(&mut b);
                a
            },
        );
        assert!(v.is_empty());
    }
}
