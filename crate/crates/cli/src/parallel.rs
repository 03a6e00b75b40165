//! Independent jobs across a capped number of threads; results keep input order.

use std::thread;

use crate::usage;

pub const THREADS_ENV: &str = "RANKFORGE_THREADS";

/// Worker cap from `RANKFORGE_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let mut queue: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    queue.reverse();
    let queue = std::sync::Mutex::new(queue);
    let results = std::sync::Mutex::new(&mut slots);
    thread::scope(|s| {
        for _ in 0..threads.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue").pop();
                let Some((k, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results")[k] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_order_for_any_thread_count() {
        for threads in [1, 2, 5] {
            let out = map((0..23).collect(), threads, |x: u64| x * x);
            assert_eq!(out, (0..23).map(|x| x * x).collect::<Vec<_>>());
        }
    }
}
