/// Round-robin cursor over the live consumer list.
///
/// The cursor counts dispatches; the candidate for the next frame is
/// `consumers[cursor % len]`. Unwritable consumers are skipped by moving the
/// cursor past them, so a slow consumer never stalls the ring.
#[derive(Debug, Default, Clone)]
pub struct RoundRobin {
    cursor: u64,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of the consumer that receives the next frame, or `None` when no
    /// consumer can take one (the frame stays queued).
    pub fn next_consumer(&mut self, count: usize, writable: impl Fn(usize) -> bool) -> Option<usize> {
        if count == 0 {
            return None;
        }
        let n = count as u64;
        for step in 0..n {
            let idx = ((self.cursor + step) % n) as usize;
            if writable(idx) {
                self.cursor += step + 1;
                return Some(idx);
            }
        }
        None
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(rr: &mut RoundRobin, names: &[&'static str], k: usize) -> Vec<&'static str> {
        (0..k)
            .map(|_| names[rr.next_consumer(names.len(), |_| true).unwrap()])
            .collect()
    }

    #[test]
    fn cycles_in_order() {
        let mut rr = RoundRobin::new();
        assert_eq!(run(&mut rr, &["A", "B", "C"], 4), ["A", "B", "C", "A"]);
    }

    #[test]
    fn disconnect_after_first_cycle() {
        // Oracle: simulate the cursor rule by hand.
        // After 4 dispatches the cursor is 4; with [A, C] left, 4 % 2 = 0 -> A.
        let mut rr = RoundRobin::new();
        assert_eq!(run(&mut rr, &["A", "B", "C"], 4), ["A", "B", "C", "A"]);
        assert_eq!(run(&mut rr, &["A", "C"], 4), ["A", "C", "A", "C"]);
    }

    #[test]
    fn single_consumer() {
        let mut rr = RoundRobin::new();
        assert_eq!(run(&mut rr, &["A"], 3), ["A", "A", "A"]);
    }

    #[test]
    fn skips_unwritable() {
        let mut rr = RoundRobin::new();
        let busy = [false, true, false];
        let picks: Vec<usize> = (0..4)
            .map(|_| rr.next_consumer(3, |i| !busy[i]).unwrap())
            .collect();
        assert_eq!(picks, [0, 2, 0, 2]);
        assert_eq!(rr.next_consumer(3, |_| false), None);
        assert_eq!(rr.next_consumer(0, |_| true), None);
    }
}
