//! Expected live-thread counts for the server architectures.

/// Thread-per-channel server: each session `i` with `nᵢ` channels runs
/// `nᵢ` channel threads plus one coordinator.
pub fn expected_threads_mt(n_list: &[usize]) -> usize {
    n_list.iter().map(|n| n + 1).sum()
}

/// Thread-per-session event-driven server: one thread per session.
pub fn expected_threads_mtedp(m: usize) -> usize {
    m
}

/// Hybrid server: three fixed threads, one thread per session, and
/// `Sᵢ + 1` for each of the `k` entries of `s_list`.
pub fn expected_threads_hybrid(m: usize, s_list: &[usize]) -> usize {
    3 + m + s_list.iter().map(|s| s + 1).sum::<usize>()
}

/// What the server's own census should read with one session thread per
/// active session plus `extra[i]` helper threads (a disk thread in async
/// mode) for session `i`.
pub fn expected_server_census(extra: &[usize]) -> usize {
    3 + extra.len() + extra.iter().sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formulas() {
        assert_eq!(expected_threads_mtedp(3), 3);
        assert_eq!(expected_threads_mt(&[2, 3]), 7);
        assert_eq!(expected_threads_hybrid(2, &[1, 1]), 9);
        assert_eq!(expected_threads_hybrid(0, &[]), 3);
        assert_eq!(expected_server_census(&[0, 0]), 5);
        assert_eq!(expected_server_census(&[1, 1, 1]), 9);
    }
}
