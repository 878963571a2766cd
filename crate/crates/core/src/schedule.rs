//! Temperature schedules.
//!
//! Schedules are expressed in the inverse-temperature convention `T = 1/tau`:
//! `T` rises from `t_start` to `t_end` over `iterations` steps, so the softmax
//! temperature `tau` falls and the weight distributions sharpen.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Sin,
    Exp,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Sin, ScheduleKind::Exp];
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Sin => "sin",
            ScheduleKind::Exp => "exp",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "sin" => Ok(ScheduleKind::Sin),
            "exp" => Ok(ScheduleKind::Exp),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}` (linear|sin|exp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    /// Inverse temperature `T`.
    pub t: f64,
    /// Softmax temperature `tau = 1/T`.
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    kind: ScheduleKind,
    t_start: f64,
    t_end: f64,
    iterations: u64,
}

impl TemperatureSchedule {
    pub fn new(kind: ScheduleKind, t_start: f64, t_end: f64, iterations: u64) -> Result<Self> {
        if !(t_start > 0.0 && t_start < t_end && t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < t_start < t_end, got t_start = {t_start}, t_end = {t_end}"
            )));
        }
        if iterations == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one iteration".into()));
        }
        Ok(TemperatureSchedule { kind, t_start, t_end, iterations })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// Temperature after `i` of `I` iterations.
    ///
    /// The interpolations are written as `(1-w) T_s + w T_e` and
    /// `T_s^(1-f) T_e^f`, algebraically the same as `T_s + w (T_e - T_s)` and
    /// `T_s (T_e/T_s)^f` but exact at both endpoints in floating point.
    pub fn temperature_at(&self, i: u64) -> Result<Temperature> {
        if i > self.iterations {
            return Err(Error::InvalidArgument(format!(
                "iteration {i} outside schedule range 0..={}",
                self.iterations
            )));
        }
        let f = i as f64 / self.iterations as f64;
        let (ts, te) = (self.t_start, self.t_end);
        let t = match self.kind {
            ScheduleKind::Linear => (1.0 - f) * ts + f * te,
            ScheduleKind::Sin => {
                let w = (f * std::f64::consts::FRAC_PI_2).sin();
                (1.0 - w) * ts + w * te
            }
            ScheduleKind::Exp => ts.powf(1.0 - f) * te.powf(f),
        };
        Ok(Temperature { t, tau: 1.0 / t })
    }

    /// `i,T,tau` rows for `i = 0..=I`, with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,T,tau\n");
        for i in 0..=self.iterations {
            let tmp = self.temperature_at(i).expect("in range");
            out.push_str(&format!("{i},{},{}\n", tmp.t, tmp.tau));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(kind: ScheduleKind, iters: u64) -> TemperatureSchedule {
        TemperatureSchedule::new(kind, 0.01, 10.0, iters).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        for kind in ScheduleKind::ALL {
            for iters in [1, 7, 100, 4690] {
                let s = sched(kind, iters);
                assert_eq!(s.temperature_at(0).unwrap().t, 0.01);
                assert_eq!(s.temperature_at(iters).unwrap().t, 10.0);
                assert_eq!(s.temperature_at(iters).unwrap().tau, 0.1);
            }
        }
    }

    #[test]
    fn midpoints() {
        let lin = sched(ScheduleKind::Linear, 100).temperature_at(50).unwrap().t;
        assert!((lin - 5.005).abs() < 1e-12);
        let exp = sched(ScheduleKind::Exp, 100).temperature_at(50).unwrap().t;
        assert!((exp - 0.01 * 1000f64.sqrt()).abs() < 1e-15);
        assert!((exp - 0.31622776601683794).abs() < 1e-15);
        let sin = sched(ScheduleKind::Sin, 100).temperature_at(50).unwrap().t;
        assert!((sin - (0.01 + std::f64::consts::FRAC_1_SQRT_2 * 9.99)).abs() < 1e-12);
    }

    #[test]
    fn monotone_and_ordered() {
        let iters = 1000;
        let s: Vec<_> = ScheduleKind::ALL.iter().map(|&k| sched(k, iters)).collect();
        let mut prev = [0.0; 3];
        for i in 0..=iters {
            let t: Vec<f64> = s.iter().map(|s| s.temperature_at(i).unwrap().t).collect();
            for k in 0..3 {
                assert!(t[k] >= prev[k]);
                prev[k] = t[k];
            }
            // sin >= linear >= exp
            assert!(t[1] >= t[0] && t[0] >= t[2], "ordering broken at i = {i}: {t:?}");
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(TemperatureSchedule::new(ScheduleKind::Exp, 10.0, 0.01, 10).is_err());
        assert!(TemperatureSchedule::new(ScheduleKind::Exp, 0.0, 1.0, 10).is_err());
        assert!(TemperatureSchedule::new(ScheduleKind::Exp, 0.01, 10.0, 0).is_err());
        assert!(sched(ScheduleKind::Linear, 10).temperature_at(11).is_err());
        assert!("cosine".parse::<ScheduleKind>().is_err());
        assert_eq!("exp".parse::<ScheduleKind>().unwrap(), ScheduleKind::Exp);
    }

    #[test]
    fn csv_rows() {
        let csv = sched(ScheduleKind::Exp, 100).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 102);
        assert_eq!(lines[0], "i,T,tau");
        assert_eq!(lines[1], "0,0.01,100");
        assert_eq!(lines[101], "100,10,0.1");
    }
}
