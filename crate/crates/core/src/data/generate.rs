use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{ChannelKind, DomainSpec};
use crate::error::Result;

/// Irregular measurement events for one channel of one visit.
#[derive(Debug, Clone)]
pub struct ChannelEvents {
    pub kind: ChannelKind,
    /// `(timestamp minutes, observed value)`, strictly increasing timestamps.
    pub events: Vec<(f64, f64)>,
}

/// One visit as an irregular multivariate event stream.
#[derive(Debug, Clone)]
pub struct RawEventStream {
    pub visit_id: u64,
    pub channels: Vec<ChannelEvents>,
    pub label: bool,
    /// Onset time for positives, truncation time for negatives (minutes).
    pub endpoint_minutes: f64,
    pub subgroup: usize,
}

/// Generator-side ground truth, kept out of the model inputs. Lets tests
/// evaluate an oracle on the clean latent severity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorTruth {
    pub visit_id: u64,
    pub label: bool,
    pub subgroup: usize,
    pub magnitude: f64,
    pub ramp_start_minutes: f64,
    pub endpoint_minutes: f64,
}

impl GeneratorTruth {
    /// Latent severity at absolute time `t` minutes.
    pub fn severity_at(&self, t: f64) -> f64 {
        let span = self.endpoint_minutes - self.ramp_start_minutes;
        if span <= 0.0 || t <= self.ramp_start_minutes {
            return 0.0;
        }
        let frac = ((t - self.ramp_start_minutes) / span).clamp(0.0, 1.0);
        self.magnitude * frac.powf(1.5)
    }
}

fn interval_for(spec: &DomainSpec, kind: ChannelKind) -> f64 {
    match kind {
        ChannelKind::Vital => spec.vital_interval_min,
        ChannelKind::Oxygen => spec.oxygen_interval_min,
        ChannelKind::Lab => spec.lab_interval_min,
    }
}

/// Synthesizes `n` visits for one domain. The same spec always produces the
/// same streams.
pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<Vec<(RawEventStream, GeneratorTruth)>> {
    spec.validate()?;
    if n == 0 {
        return Err(crate::error::Error::InvalidConfig("n_visits must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(n);
    for visit_id in 0..n as u64 {
        let subgroup = pick_subgroup(spec, &mut rng);
        let end_minutes = rng.gen_range(spec.visit_hours_min..=spec.visit_hours_max) * 60.0;
        let label = rng.gen_bool(spec.label.prevalence);
        let magnitude = if label {
            (spec.label.ramp_magnitude_mean + spec.label.ramp_magnitude_sd * std_normal.sample(&mut rng)).max(0.0)
        } else {
            (spec.label.negative_drift_sd * std_normal.sample(&mut rng)).abs()
        };
        let ramp_start = (end_minutes - spec.label.ramp_hours * 60.0).max(0.0);
        let truth = GeneratorTruth {
            visit_id,
            label,
            subgroup,
            magnitude,
            ramp_start_minutes: ramp_start,
            endpoint_minutes: end_minutes,
        };
        let sg = &spec.subgroups[subgroup];
        let mut channels = Vec::with_capacity(spec.n_raw_channels());
        for c in 0..spec.n_raw_channels() {
            let kind = spec.kind_of(c);
            let gap = Exp::new(1.0 / interval_for(spec, kind)).unwrap();
            let mut events = Vec::new();
            let mut t = gap.sample(&mut rng);
            while t < end_minutes {
                let noise = spec.obs_noise_sd * sg.var_scale[c] * std_normal.sample(&mut rng);
                let latent = spec.channel_baseline[c]
                    + sg.mean_shift[c]
                    + spec.label.signal_loading[c] * truth.severity_at(t)
                    + noise;
                let observed = spec.channel_scale[c] * latent + spec.channel_offset[c];
                events.push((t, observed));
                t += gap.sample(&mut rng);
            }
            channels.push(ChannelEvents { kind, events });
        }
        out.push((
            RawEventStream {
                visit_id,
                channels,
                label,
                endpoint_minutes: end_minutes,
                subgroup,
            },
            truth,
        ));
    }
    Ok(out)
}

fn pick_subgroup(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, s) in spec.subgroups.iter().enumerate() {
        acc += s.weight;
        if draw < acc {
            return i;
        }
    }
    spec.subgroups.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_identical() {
        let spec = DomainSpec::desk_default("d", 42);
        let a = generate_domain(&spec, 20).unwrap();
        let b = generate_domain(&spec, 20).unwrap();
        for ((sa, _), (sb, _)) in a.iter().zip(&b) {
            assert_eq!(sa.endpoint_minutes, sb.endpoint_minutes);
            for (ca, cb) in sa.channels.iter().zip(&sb.channels) {
                assert_eq!(ca.events.len(), cb.events.len());
                for (ea, eb) in ca.events.iter().zip(&cb.events) {
                    assert_eq!(ea.0.to_bits(), eb.0.to_bits());
                    assert_eq!(ea.1.to_bits(), eb.1.to_bits());
                }
            }
        }
    }

    #[test]
    fn timestamps_are_increasing_and_in_range() {
        let spec = DomainSpec::desk_default("d", 7);
        for (s, _) in generate_domain(&spec, 30).unwrap() {
            for ch in &s.channels {
                let mut prev = 0.0;
                for &(t, _) in &ch.events {
                    assert!(t > prev || prev == 0.0);
                    assert!(t >= 0.0 && t <= s.endpoint_minutes);
                    prev = t;
                }
            }
        }
    }

    #[test]
    fn prevalence_close_to_target() {
        let mut spec = DomainSpec::desk_default("d", 3);
        spec.label.prevalence = 0.4;
        let visits = generate_domain(&spec, 10_000).unwrap();
        let pos = visits.iter().filter(|(s, _)| s.label).count();
        let rate = pos as f64 / visits.len() as f64;
        assert!((rate - 0.4).abs() < 0.02, "prevalence {rate}");
    }

    #[test]
    fn rejects_invalid_spec() {
        let mut spec = DomainSpec::desk_default("d", 0);
        spec.subgroups[0].weight = 0.5;
        assert!(generate_domain(&spec, 5).is_err());
        let spec = DomainSpec::desk_default("d", 0);
        assert!(generate_domain(&spec, 0).is_err());
    }

    #[test]
    fn severity_ramp_shape() {
        let truth = GeneratorTruth {
            visit_id: 0,
            label: true,
            subgroup: 0,
            magnitude: 2.0,
            ramp_start_minutes: 100.0,
            endpoint_minutes: 200.0,
        };
        assert_eq!(truth.severity_at(50.0), 0.0);
        assert_eq!(truth.severity_at(100.0), 0.0);
        assert!((truth.severity_at(200.0) - 2.0).abs() < 1e-12);
        let mid = truth.severity_at(150.0);
        assert!(mid > 0.0 && mid < 2.0);
    }
}
