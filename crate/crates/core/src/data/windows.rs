use super::load::Dataset;

/// Longest history fed to the user encoder.
pub const MAX_HISTORY: usize = 20;

/// A next-item prediction example: the events `start..target` of one user
/// form the history and event `target` is the item to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub user: usize,
    pub start: usize,
    pub target: usize,
}

impl Sample {
    pub fn history_len(&self) -> usize {
        self.target - self.start
    }

    fn ending_at(user: usize, target: usize) -> Option<Self> {
        (target > 0).then(|| Self {
            user,
            start: target.saturating_sub(MAX_HISTORY),
            target,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<Sample>,
    pub validation: Option<Sample>,
    pub test: Option<Sample>,
}

/// The last event is the test target and the second-to-last the validation
/// target. The remaining prefix yields full windows of `MAX_HISTORY + 1`
/// at stride 1, or a single shorter window when it is too short for one.
pub fn make_windows(user: usize, n_events: usize) -> UserSplit {
    if n_events < 2 {
        return UserSplit::default();
    }
    let test = Sample::ending_at(user, n_events - 1);
    let validation = Sample::ending_at(user, n_events - 2);
    let prefix = n_events - 2;
    let train = if prefix > MAX_HISTORY {
        (MAX_HISTORY..prefix)
            .map(|target| Sample {
                user,
                start: target - MAX_HISTORY,
                target,
            })
            .collect()
    } else {
        Sample::ending_at(user, prefix.saturating_sub(1)).into_iter().collect()
    };
    UserSplit {
        train,
        validation,
        test,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Split {
    pub fn build(ds: &Dataset) -> Self {
        let mut out = Self::default();
        for (u, h) in ds.users.iter().enumerate() {
            let s = make_windows(u, h.events.len());
            out.train.extend(s.train);
            out.validation.extend(s.validation);
            out.test.extend(s.test);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn length_25_gives_three_full_windows() {
        let s = make_windows(0, 25);
        let targets: Vec<usize> = s.train.iter().map(|w| w.target).collect();
        assert_eq!(targets, vec![20, 21, 22]);
        assert!(s.train.iter().all(|w| w.history_len() == MAX_HISTORY));
        assert_eq!(s.validation.unwrap().target, 23);
        assert_eq!(s.test.unwrap().target, 24);
        assert_eq!(s.test.unwrap().history_len(), MAX_HISTORY);
    }

    #[test]
    fn length_21_gives_one_padded_window() {
        let s = make_windows(0, 21);
        assert_eq!(s.train, vec![Sample { user: 0, start: 0, target: 18 }]);
    }

    #[test]
    fn length_2_gives_only_a_test_sample() {
        let s = make_windows(3, 2);
        assert!(s.train.is_empty());
        assert!(s.validation.is_none());
        assert_eq!(s.test, Some(Sample { user: 3, start: 0, target: 1 }));
        assert_eq!(make_windows(0, 1), UserSplit::default());
    }

    proptest! {
        #[test]
        fn targets_are_distinct_and_never_cross_the_tail(n in 0usize..80) {
            let s = make_windows(0, n);
            let mut targets: Vec<usize> = s.train.iter().map(|w| w.target).collect();
            for w in &s.train {
                prop_assert!(w.target + 2 < n.max(2));
                prop_assert!(w.history_len() >= 1 && w.history_len() <= MAX_HISTORY);
            }
            targets.extend(s.validation.map(|w| w.target));
            targets.extend(s.test.map(|w| w.target));
            let len = targets.len();
            targets.sort_unstable();
            targets.dedup();
            prop_assert_eq!(targets.len(), len);
            prop_assert!(targets.iter().all(|&t| t < n));
        }
    }
}
