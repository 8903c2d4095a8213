/// Dynamic loss scaler.
///
/// The scale is a power of two in `[1, 2^24]`. An overflowing step halves it
/// (never below 1) and is skipped; `growth_interval` consecutive clean steps
/// double it (never above 2^24).
#[derive(Clone, Debug, PartialEq)]
pub struct LossScaler {
    scale: f32,
    growth_interval: u32,
    good_steps: u32,
}

pub const INITIAL_SCALE: f32 = 65536.0;
pub const MIN_SCALE: f32 = 1.0;
pub const MAX_SCALE: f32 = 16_777_216.0;
pub const DEFAULT_GROWTH_INTERVAL: u32 = 2000;

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler::new(INITIAL_SCALE, DEFAULT_GROWTH_INTERVAL)
    }
}

impl LossScaler {
    /// `scale` is clamped into range and rounded down to a power of two.
    pub fn new(scale: f32, growth_interval: u32) -> LossScaler {
        let clamped = scale.clamp(MIN_SCALE, MAX_SCALE);
        let pow2 = 2f32.powi(clamped.log2().floor() as i32);
        LossScaler {
            scale: pow2,
            growth_interval: growth_interval.max(1),
            good_steps: 0,
        }
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn growth_interval(&self) -> u32 {
        self.growth_interval
    }

    pub fn good_steps(&self) -> u32 {
        self.good_steps
    }

    /// Records the outcome of one step and returns whether the optimizer
    /// update must be skipped.
    pub fn update(&mut self, overflow: bool) -> bool {
        if overflow {
            self.scale = (self.scale / 2.0).max(MIN_SCALE);
            self.good_steps = 0;
            return true;
        }
        self.good_steps += 1;
        if self.good_steps >= self.growth_interval {
            self.scale = (self.scale * 2.0).min(MAX_SCALE);
            self.good_steps = 0;
        }
        false
    }
}

/// Functional form of [`LossScaler::update`]: `(next state, skip)`.
pub fn scaler_step(scaler: &LossScaler, overflow: bool) -> (LossScaler, bool) {
    let mut next = scaler.clone();
    let skip = next.update(overflow);
    (next, skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let s = LossScaler::new(65536.0, 2000);
        let (next, skip) = scaler_step(&s, true);
        assert_eq!(next.scale(), 32768.0);
        assert!(skip);
        assert_eq!(next.good_steps(), 0);

        let mut grow = LossScaler::new(65536.0, 2000);
        for _ in 0..1999 {
            assert!(!grow.update(false));
        }
        assert_eq!(grow.scale(), 65536.0);
        grow.update(false);
        assert_eq!(grow.scale(), 131072.0);

        let (floor, skip) = scaler_step(&LossScaler::new(1.0, 2000), true);
        assert_eq!(floor.scale(), 1.0);
        assert!(skip);
    }

    #[test]
    fn ceiling() {
        let mut s = LossScaler::new(MAX_SCALE, 1);
        s.update(false);
        assert_eq!(s.scale(), MAX_SCALE);
        assert_eq!(LossScaler::new(1e9, 5).scale(), MAX_SCALE);
        assert_eq!(LossScaler::new(3000.0, 5).scale(), 2048.0);
    }

    proptest! {
        #[test]
        fn scale_stays_power_of_two(events in proptest::collection::vec(any::<bool>(), 0..400), interval in 1u32..8) {
            let mut s = LossScaler::new(INITIAL_SCALE, interval);
            for overflow in events {
                s.update(overflow);
                let e = s.scale().log2();
                prop_assert_eq!(e.fract(), 0.0);
                prop_assert!((MIN_SCALE..=MAX_SCALE).contains(&s.scale()));
            }
        }
    }
}
