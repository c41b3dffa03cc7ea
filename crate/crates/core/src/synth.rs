//! Deterministic synthetic populations: a standard marker catalog,
//! participants with catalog-consistent fields, a templated nudge library and
//! an interaction log drawn from planted per-segment preferences.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derived_rng;
use crate::graph::{
    write_jsonl, Day, EventKind, FieldMap, FieldValue, GraphError, InteractionEvent, MarkerCatalog, MarkerRule,
    NudgeTemplate, ParticipantRecord, SegmentDef, Targeting,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid population spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_users: usize,
    pub n_nudges: usize,
    /// Segments are age group × activity level combinations, taken in order.
    pub n_segments: usize,
    /// Probability that a given candidate nudge was sent to a user during the
    /// history window.
    pub interaction_density: f64,
    /// Scale of the planted user/nudge affinity in the open probability.
    pub affinity_strength: f64,
    /// Width of the latent preference space.
    pub latent_dim: usize,
    /// Spread of users around their segment's preference vector.
    pub user_noise: f64,
    /// Fraction of nudges with no segment constraint.
    pub universal_fraction: f64,
    pub history_days: Day,
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self::small(0)
    }
}

impl PopulationSpec {
    /// 1k users and a 96-nudge library.
    pub fn small(seed: u64) -> Self {
        Self {
            n_users: 1000,
            n_nudges: 96,
            n_segments: MAX_SEGMENTS,
            interaction_density: 0.5,
            affinity_strength: 3.0,
            latent_dim: 4,
            user_noise: 0.5,
            universal_fraction: 0.2,
            history_days: 28,
            seed,
        }
    }

    /// Scaling-benchmark population; candidate pairs grow linearly with
    /// `n_users`.
    pub fn bench(n_users: usize, seed: u64) -> Self {
        Self {
            n_users,
            interaction_density: 0.05,
            ..Self::small(seed)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_users == 0 || self.n_nudges == 0 || self.n_segments == 0 {
            return bad("user, nudge and segment counts must be at least 1".into());
        }
        if self.n_segments > MAX_SEGMENTS {
            return bad(format!(
                "{} segments requested but only {MAX_SEGMENTS} age group × activity combinations exist",
                self.n_segments
            ));
        }
        if !(0.0..=1.0).contains(&self.interaction_density) {
            return bad("interaction_density must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.universal_fraction) {
            return bad("universal_fraction must lie in [0, 1]".into());
        }
        if self.latent_dim == 0 || self.history_days == 0 {
            return bad("latent_dim and history_days must be at least 1".into());
        }
        if !self.affinity_strength.is_finite() || !self.user_noise.is_finite() || self.user_noise < 0.0 {
            return bad("affinity_strength and user_noise must be finite, noise non-negative".into());
        }
        Ok(())
    }
}

const AGE_GROUPS: [(&str, &str, &str); 3] = [
    ("young_adult", "age group: young adult", "Young Adults"),
    ("middle_aged", "age group: middle aged", "Middle-Aged Adults"),
    ("senior", "age group: senior", "Seniors"),
];

const ACTIVITY: [(&str, &str, &str); 4] = [
    ("inactive", "activity: inactive", "Inactive"),
    ("lightly_active", "activity: lightly active", "Lightly Active"),
    ("active", "activity: active", "Active"),
    ("very_active", "activity: very active", "Very Active"),
];

pub const MAX_SEGMENTS: usize = AGE_GROUPS.len() * ACTIVITY.len();

/// A numeric field and its bucket edges.
struct Numeric {
    source: &'static str,
    marker: &'static str,
    topic: &'static str,
    min: f64,
    max: f64,
    boundaries: &'static [f64],
}

const NUMERIC: &[Numeric] = &[
    Numeric { source: "age", marker: "age", topic: "demographics", min: 18.0, max: 90.0, boundaries: &[25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0] },
    Numeric { source: "bmi", marker: "bmi", topic: "body composition", min: 12.0, max: 60.0, boundaries: &[18.5, 23.0, 25.0, 27.5, 30.0] },
    Numeric { source: "waist_cm", marker: "waist", topic: "body composition", min: 50.0, max: 160.0, boundaries: &[80.0, 90.0, 100.0, 110.0] },
    Numeric { source: "avg_daily_steps", marker: "steps", topic: "physical activity", min: 0.0, max: 40000.0, boundaries: &[2500.0, 5000.0, 7500.0, 10000.0, 12500.0] },
    Numeric { source: "weekday_steps", marker: "weekday steps", topic: "physical activity", min: 0.0, max: 40000.0, boundaries: &[2500.0, 5000.0, 7500.0, 10000.0, 12500.0] },
    Numeric { source: "weekend_steps", marker: "weekend steps", topic: "physical activity", min: 0.0, max: 40000.0, boundaries: &[2500.0, 5000.0, 7500.0, 10000.0, 12500.0] },
    Numeric { source: "weekly_mvpa_minutes", marker: "mvpa", topic: "physical activity", min: 0.0, max: 1500.0, boundaries: &[30.0, 75.0, 150.0, 225.0, 300.0] },
    Numeric { source: "active_days_per_week", marker: "active days", topic: "physical activity", min: 0.0, max: 8.0, boundaries: &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0] },
    Numeric { source: "sedentary_hours", marker: "sedentary hours", topic: "physical activity", min: 0.0, max: 24.0, boundaries: &[4.0, 6.0, 8.0, 10.0, 12.0] },
    Numeric { source: "sleep_hours", marker: "sleep", topic: "sleep", min: 0.0, max: 14.0, boundaries: &[5.0, 6.0, 7.0, 8.0, 9.0] },
    Numeric { source: "resting_hr", marker: "resting heart rate", topic: "cardiovascular", min: 30.0, max: 130.0, boundaries: &[55.0, 60.0, 70.0, 80.0, 90.0] },
    Numeric { source: "vo2max", marker: "vo2max", topic: "cardiovascular", min: 10.0, max: 80.0, boundaries: &[25.0, 30.0, 35.0, 40.0, 45.0] },
    Numeric { source: "diet_score", marker: "diet score", topic: "lifestyle", min: 0.0, max: 11.0, boundaries: &[2.0, 4.0, 6.0, 8.0] },
    Numeric { source: "water_cups", marker: "water", topic: "lifestyle", min: 0.0, max: 21.0, boundaries: &[2.0, 4.0, 6.0, 8.0] },
    Numeric { source: "stress_score", marker: "stress", topic: "wellbeing", min: 0.0, max: 11.0, boundaries: &[2.0, 4.0, 6.0, 8.0] },
    Numeric { source: "mood_score", marker: "mood", topic: "wellbeing", min: 0.0, max: 11.0, boundaries: &[2.0, 4.0, 6.0, 8.0] },
    Numeric { source: "chronic_conditions", marker: "chronic conditions", topic: "wellbeing", min: 0.0, max: 11.0, boundaries: &[1.0, 2.0, 3.0] },
    Numeric { source: "app_days_active", marker: "app days active", topic: "engagement", min: 0.0, max: 31.0, boundaries: &[5.0, 10.0, 15.0, 20.0, 25.0] },
];

const CATEGORICAL: &[(&str, &str, &[&str])] = &[
    ("sex", "demographics", &["F", "M"]),
    ("ethnicity", "demographics", &["chinese", "malay", "indian", "other"]),
    ("steps_trend", "physical activity", &["declining", "stable", "improving"]),
    ("mvpa_trend", "physical activity", &["declining", "stable", "improving"]),
    ("smoking", "lifestyle", &["never", "former", "current"]),
    ("alcohol", "lifestyle", &["none", "light", "moderate", "heavy"]),
    ("device", "engagement", &["phone", "watch", "band"]),
];

fn fmt_edge(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn range_labels(prefix: &str, b: &[f64]) -> Vec<String> {
    let mut out = vec![format!("{prefix}: <{}", fmt_edge(b[0]))];
    for w in b.windows(2) {
        out.push(format!("{prefix}: {}-{}", fmt_edge(w[0]), fmt_edge(w[1])));
    }
    out.push(format!("{prefix}: {}+", fmt_edge(b[b.len() - 1])));
    out
}

fn segment_defs(n: usize) -> Vec<SegmentDef> {
    ACTIVITY
        .iter()
        .flat_map(|act| AGE_GROUPS.iter().map(move |age| (act, age)))
        .take(n)
        .map(|(act, age)| SegmentDef {
            id: format!("{} {}", act.2, age.2),
            markers: vec![age.1.to_string(), act.1.to_string()],
        })
        .collect()
}

/// The catalog every synthetic population is drawn against, with
/// `n_segments` segments.
pub fn standard_catalog(n_segments: usize) -> Result<MarkerCatalog, SynthError> {
    if n_segments > MAX_SEGMENTS {
        return Err(SynthError::InvalidSpec(format!(
            "{n_segments} segments exceed the {MAX_SEGMENTS} available combinations"
        )));
    }
    let mut rules = vec![
        MarkerRule::categorical(
            "age group",
            "age_group",
            "demographics",
            &AGE_GROUPS.map(|(code, label, _)| (code, label)),
        ),
        MarkerRule::categorical(
            "activity",
            "activity_level",
            "physical activity",
            &ACTIVITY.map(|(code, label, _)| (code, label)),
        ),
    ];
    for n in NUMERIC {
        let mut r = MarkerRule::range(
            n.marker,
            n.source,
            n.topic,
            Some(n.min),
            n.boundaries.to_vec(),
            range_labels(n.marker, n.boundaries),
        );
        r.max = Some(n.max);
        rules.push(r);
    }
    for (source, topic, codes) in CATEGORICAL {
        let labels: Vec<(String, String)> = codes
            .iter()
            .map(|c| (c.to_string(), format!("{}: {}", source.replace('_', " "), c.replace('_', " "))))
            .collect();
        let pairs: Vec<(&str, &str)> = labels.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        rules.push(MarkerRule::categorical(&source.replace('_', " "), source, topic, &pairs));
    }
    Ok(MarkerCatalog::new(rules, segment_defs(n_segments))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub spec: PopulationSpec,
    pub catalog: MarkerCatalog,
    pub participants: Vec<ParticipantRecord>,
    pub library: Vec<NudgeTemplate>,
    pub interactions: Vec<InteractionEvent>,
}

impl Population {
    /// Writes `catalog.toml`, `participants.jsonl`, `library.jsonl` and
    /// `interactions.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("catalog.toml"), self.catalog.to_toml()?)?;
        let jsonl = |name: &str| -> Result<BufWriter<File>, SynthError> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        let mut w = jsonl("participants.jsonl")?;
        write_jsonl(&mut w, &self.participants)?;
        w.flush()?;
        let mut w = jsonl("library.jsonl")?;
        write_jsonl(&mut w, &self.library)?;
        w.flush()?;
        let mut w = jsonl("interactions.jsonl")?;
        write_jsonl(&mut w, &self.interactions)?;
        w.flush()?;
        Ok(())
    }

    /// User-field contexts keyed by user entity id, for template rendering.
    pub fn contexts(&self) -> BTreeMap<crate::graph::EntityId, FieldMap> {
        self.participants
            .iter()
            .map(|p| (crate::graph::EntityId::user(p.user_id.as_str()), p.fields.clone()))
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn latent(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| gaussian(rng)).collect()
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

fn user_fields(rng: &mut ChaCha8Rng) -> FieldMap {
    let mut f = FieldMap::new();
    let num = |f: &mut FieldMap, k: &str, v: f64| {
        f.insert(k.to_string(), FieldValue::Number(v));
    };
    let age = rng.gen_range(18..90) as f64;
    let steps = rng.gen_range(800.0f64..16000.0).round();
    num(&mut f, "age", age);
    num(&mut f, "avg_daily_steps", steps);
    num(&mut f, "weekday_steps", (steps * rng.gen_range(0.85..1.15)).round().min(39999.0));
    num(&mut f, "weekend_steps", (steps * rng.gen_range(0.6..1.3)).round().min(39999.0));
    num(&mut f, "weekly_mvpa_minutes", (steps / 60.0 * rng.gen_range(0.3..1.7)).round());
    num(&mut f, "active_days_per_week", rng.gen_range(0..8) as f64);
    num(&mut f, "sedentary_hours", round_to(rng.gen_range(2.0..16.0), 1));
    num(&mut f, "bmi", round_to(rng.gen_range(16.0..40.0), 1));
    num(&mut f, "waist_cm", rng.gen_range(60..130) as f64);
    num(&mut f, "sleep_hours", round_to(rng.gen_range(4.0..10.5), 1));
    num(&mut f, "resting_hr", rng.gen_range(45..100) as f64);
    num(&mut f, "vo2max", rng.gen_range(18..60) as f64);
    for k in ["diet_score", "stress_score", "mood_score"] {
        num(&mut f, k, rng.gen_range(0..11) as f64);
    }
    num(&mut f, "water_cups", rng.gen_range(0..13) as f64);
    num(&mut f, "chronic_conditions", rng.gen_range(0..5) as f64);
    num(&mut f, "app_days_active", rng.gen_range(0..31) as f64);

    let age_group = match age as u32 {
        ..40 => "young_adult",
        40..60 => "middle_aged",
        _ => "senior",
    };
    let activity = match steps as u32 {
        ..5000 => "inactive",
        5000..7500 => "lightly_active",
        7500..10000 => "active",
        _ => "very_active",
    };
    f.insert("age_group".into(), age_group.into());
    f.insert("activity_level".into(), activity.into());
    for (source, _, codes) in CATEGORICAL {
        f.insert(source.to_string(), codes[rng.gen_range(0..codes.len())].into());
    }
    f
}

fn user_segment(fields: &FieldMap, segments: &[SegmentDef], catalog: &MarkerCatalog) -> Option<usize> {
    let markers: std::collections::BTreeSet<String> = catalog.binarize(fields).ok()?.into_values().collect();
    segments
        .iter()
        .position(|s| s.markers.iter().all(|m| markers.contains(m)))
}

const STEPS_TEXTS: &[&str] = &[
    "Great job walking {{avg_daily_steps}} daily steps last week! Can you add 500 more today?",
    "You averaged {{avg_daily_steps}} steps a day. A short walk after lunch keeps the streak going.",
    "Weekends count too: you walked {{weekend_steps}} steps last Saturday. Try a park loop this week.",
    "Take the stairs today. Every flight moves you past your {{avg_daily_steps}} step average.",
];

const MVPA_TEXTS: &[&str] = &[
    "You logged {{weekly_mvpa_minutes}} active minutes last week. Aim for 150 with a brisk 20-minute walk.",
    "A quick workout today adds to your {{weekly_mvpa_minutes}} weekly active minutes.",
    "Try a 10-minute bodyweight circuit during a break today.",
    "Cycling to the shops counts as moderate activity. Give it a go this week!",
    "Dance, swim or play: any activity that raises your heart rate counts toward your weekly goal.",
];

/// Generates participants, a nudge library and an interaction log.
///
/// Each segment owns a latent preference vector; users scatter around their
/// segment's vector and every nudge has its own vector. A sent nudge is
/// opened with probability `σ(strength · ⟨user, nudge⟩ / √dim − 0.5)`.
pub fn generate_population(spec: &PopulationSpec) -> Result<Population, SynthError> {
    spec.validate()?;
    let catalog = standard_catalog(spec.n_segments)?;
    let segments = catalog.segments.clone();
    let dim = spec.latent_dim;
    let seed = spec.seed;

    let mut rng = derived_rng(seed, &[b"segments"]);
    let seg_vecs: Vec<Vec<f64>> = (0..segments.len()).map(|_| latent(&mut rng, dim)).collect();

    let n_steps = ((spec.n_nudges as f64) * 31.0 / 96.0).round() as usize;
    let mut library = Vec::with_capacity(spec.n_nudges);
    let mut nudge_vecs = Vec::with_capacity(spec.n_nudges);
    for i in 0..spec.n_nudges {
        let id = format!("n{i:03}");
        let mut rng = derived_rng(seed, &[b"nudge", id.as_bytes()]);
        let (goal, text) = if i < n_steps {
            ("steps", STEPS_TEXTS[i % STEPS_TEXTS.len()])
        } else {
            ("mvpa", MVPA_TEXTS[i % MVPA_TEXTS.len()])
        };
        let mut targeted = Vec::new();
        if !rng.gen_bool(spec.universal_fraction) {
            let first = rng.gen_range(0..segments.len());
            targeted.push(segments[first].id.clone());
            if segments.len() > 1 && rng.gen_bool(0.5) {
                let second = (first + rng.gen_range(1..segments.len())) % segments.len();
                targeted.push(segments[second].id.clone());
            }
        }
        library.push(NudgeTemplate {
            nudge_id: id,
            goal: goal.into(),
            text: text.into(),
            targeting: Targeting {
                segments: targeted,
                markers: Vec::new(),
            },
        });
        nudge_vecs.push(latent(&mut rng, dim));
    }

    let width = (spec.n_users.max(1) - 1).to_string().len().max(5);
    let mut participants = Vec::with_capacity(spec.n_users);
    let mut interactions = Vec::new();
    for i in 0..spec.n_users {
        let user_id = format!("p{i:0width$}");
        let mut rng = derived_rng(seed, &[b"user", user_id.as_bytes()]);
        let fields = user_fields(&mut rng);
        let seg = user_segment(&fields, &segments, &catalog);
        let base = seg.map_or_else(|| vec![0.0; dim], |s| seg_vecs[s].clone());
        let pref: Vec<f64> = base.iter().map(|b| b + spec.user_noise * gaussian(&mut rng)).collect();

        if spec.interaction_density > 0.0 {
            for (t, nv) in library.iter().zip(&nudge_vecs) {
                let eligible = t.targeting.segments.is_empty()
                    || seg.is_some_and(|s| t.targeting.segments.contains(&segments[s].id));
                if !eligible || !rng.gen_bool(spec.interaction_density) {
                    continue;
                }
                let day = rng.gen_range(1..=spec.history_days);
                let affinity = pref.iter().zip(nv).map(|(a, b)| a * b).sum::<f64>() / (dim as f64).sqrt();
                let p_open = 1.0 / (1.0 + (-(spec.affinity_strength * affinity - 0.5)).exp());
                let ev = |event, day| InteractionEvent {
                    user_id: user_id.clone(),
                    nudge_id: t.nudge_id.clone(),
                    event,
                    day,
                };
                interactions.push(ev(EventKind::Sent, day));
                if rng.gen_bool(p_open) {
                    interactions.push(ev(EventKind::Opened, day));
                    if rng.gen_bool(0.3) {
                        let kind = if rng.gen_bool(p_open) {
                            EventKind::RatedUseful
                        } else {
                            EventKind::RatedNotUseful
                        };
                        interactions.push(ev(kind, day));
                    }
                }
            }
        }
        participants.push(ParticipantRecord { user_id, fields });
    }
    interactions.sort_by(|a, b| (a.day, &a.user_id, &a.nudge_id, a.event).cmp(&(b.day, &b.user_id, &b.nudge_id, b.event)));

    Ok(Population {
        spec: spec.clone(),
        catalog,
        participants,
        library,
        interactions,
    })
}
