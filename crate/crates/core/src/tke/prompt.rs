use serde::{Deserialize, Serialize};

use super::TkeError;
use crate::tasks::{OutputFormat, RoadNetwork, TaskKind};
use crate::tpa::{Embedding, Normalization};
use crate::traj::SpatioTemporalPoint;

pub const PROMPT_FEATURES: usize = 34;
const TASK_BLOCK: usize = 10;
const DATA_BLOCK: usize = 13;
const INFO_BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherCondition {
    Sunny,
    Rain,
    Cloudy,
    Snow,
}

impl WeatherCondition {
    pub const ALL: [WeatherCondition; 4] =
        [WeatherCondition::Sunny, WeatherCondition::Rain, WeatherCondition::Cloudy, WeatherCondition::Snow];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sunny" => Some(Self::Sunny),
            "rain" | "rainy" => Some(Self::Rain),
            "cloudy" => Some(Self::Cloudy),
            "snow" | "snowy" => Some(Self::Snow),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    pub condition: WeatherCondition,
    pub temperature_c: f64,
}

/// Side information attached to a prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct Information<'a> {
    pub road: Option<&'a RoadNetwork>,
    pub weather: Option<Weather>,
}

/// Raw points on a client, embeddings on the server.
#[derive(Debug, Clone, Copy)]
pub enum PromptData<'a> {
    Points(&'a [SpatioTemporalPoint]),
    Embeddings(&'a [Embedding]),
}

#[derive(Debug, Clone)]
pub struct Prompt<'a> {
    pub task: TaskKind,
    pub description: &'static str,
    pub data: PromptData<'a>,
    pub info: Information<'a>,
    pub format: OutputFormat,
}

pub fn build_prompt<'a>(
    task: TaskKind,
    data: PromptData<'a>,
    info: Information<'a>,
    format: OutputFormat,
) -> Result<Prompt<'a>, TkeError> {
    if task.format() != format {
        return Err(TkeError::FormatTaskMismatch { task, format });
    }
    Ok(Prompt { task, description: task.description(), data, info, format })
}

fn push_stats(out: &mut Vec<f64>, col: &[f64]) {
    if col.is_empty() {
        out.extend_from_slice(&[0.0; 4]);
        return;
    }
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = col.iter().copied().fold(f64::INFINITY, f64::min);
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.extend_from_slice(&[mean, var.sqrt(), min, max]);
}

fn dt_minutes(ts: impl Iterator<Item = i64>) -> Vec<f64> {
    let mut prev = None;
    ts.map(|t| {
        let d = prev.map_or(0.0, |p| (t - p) as f64 / 60.0);
        prev = Some(t);
        d
    })
    .collect()
}

/// Fixed-length prompt encoding: task one-hot, data summary, side
/// information and format one-hot.
pub fn featurize_prompt(prompt: &Prompt<'_>, norm: &Normalization) -> Vec<f64> {
    let mut out = Vec::with_capacity(PROMPT_FEATURES);
    let mut task = [0.0; TASK_BLOCK];
    task[prompt.task.index()] = 1.0;
    out.extend_from_slice(&task);

    let b = &norm.bbox;
    let (cols, n, centroid) = match prompt.data {
        PromptData::Points(pts) => {
            let x: Vec<f64> = pts.iter().map(|p| (p.lon - b.lon_min) / (b.lon_max - b.lon_min)).collect();
            let y: Vec<f64> = pts.iter().map(|p| (p.lat - b.lat_min) / (b.lat_max - b.lat_min)).collect();
            let centroid = (!pts.is_empty()).then(|| {
                let k = pts.len() as f64;
                SpatioTemporalPoint::new(
                    pts.iter().map(|p| p.lon).sum::<f64>() / k,
                    pts.iter().map(|p| p.lat).sum::<f64>() / k,
                    0,
                )
            });
            ([x, y, dt_minutes(pts.iter().map(|p| p.t))], pts.len(), centroid)
        }
        PromptData::Embeddings(es) => {
            let d = |e: &Embedding| e.e.len().max(1) as f64;
            let mean: Vec<f64> = es.iter().map(|e| e.e.iter().sum::<f64>() / d(e)).collect();
            let norm: Vec<f64> = es.iter().map(|e| e.e.iter().map(|v| v * v).sum::<f64>().sqrt() / d(e).sqrt()).collect();
            ([mean, norm, dt_minutes(es.iter().map(|e| e.key.t))], es.len(), None)
        }
    };
    out.push((n as f64).ln_1p() / 5.0);
    for c in &cols {
        push_stats(&mut out, c);
    }
    debug_assert_eq!(out.len(), TASK_BLOCK + DATA_BLOCK);

    let mut info = [0.0; INFO_BLOCK];
    if let Some(w) = prompt.info.weather {
        info[WeatherCondition::ALL.iter().position(|&c| c == w.condition).expect("listed")] = 1.0;
        info[4] = w.temperature_c / 40.0;
    }
    if let (Some(road), Some(c)) = (prompt.info.road, centroid) {
        for (k, (_, d)) in road.nearest(&c, 3).into_iter().enumerate() {
            info[5 + k] = d / 1000.0;
        }
    }
    out.extend_from_slice(&info);

    let mut fmt = [0.0; 3];
    fmt[prompt.format.index()] = 1.0;
    out.extend_from_slice(&fmt);
    debug_assert_eq!(out.len(), PROMPT_FEATURES);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::BBox;

    fn norm() -> Normalization {
        Normalization::new(BBox::new(116.0, 39.0, 117.0, 40.0), 0, 10_000).unwrap()
    }

    fn pts() -> Vec<SpatioTemporalPoint> {
        (0..5).map(|i| SpatioTemporalPoint::new(116.5 + 0.001 * i as f64, 39.5, 10 * i)).collect()
    }

    #[test]
    fn weather_encoding() {
        let p = pts();
        let info = Information { road: None, weather: Some(Weather { condition: WeatherCondition::Sunny, temperature_c: 15.0 }) };
        let pr = build_prompt(TaskKind::NF, PromptData::Points(&p), info, OutputFormat::Trajectory).unwrap();
        let f = featurize_prompt(&pr, &norm());
        assert_eq!(f.len(), PROMPT_FEATURES);
        assert_eq!(f[TaskKind::NF.index()], 1.0);
        assert_eq!(&f[23..28], &[1.0, 0.0, 0.0, 0.0, 15.0 / 40.0]);
        assert_eq!(f, featurize_prompt(&pr, &norm()));
    }

    #[test]
    fn absent_information_is_zero() {
        let p = pts();
        let pr = build_prompt(TaskKind::SPD, PromptData::Points(&p), Information::default(), OutputFormat::Points).unwrap();
        let f = featurize_prompt(&pr, &norm());
        assert!(f[23..31].iter().all(|&v| v == 0.0));
        assert_eq!(f[31 + OutputFormat::Points.index()], 1.0);
    }

    #[test]
    fn road_distances_filled() {
        // Off every road of the 3-line grid.
        let p: Vec<_> = pts().into_iter().map(|q| SpatioTemporalPoint::new(q.lon, 39.3, q.t)).collect();
        let road = RoadNetwork::grid(BBox::new(116.0, 39.0, 117.0, 40.0), 3);
        let info = Information { road: Some(&road), weather: None };
        let pr = build_prompt(TaskKind::MM, PromptData::Points(&p), info, OutputFormat::Trajectory).unwrap();
        let f = featurize_prompt(&pr, &norm());
        assert!(f[28..31].iter().all(|&v| v > 0.0));
        assert!(f[28] <= f[29] && f[29] <= f[30]);
    }

    #[test]
    fn format_must_match_task() {
        let p = pts();
        let r = build_prompt(TaskKind::AD, PromptData::Points(&p), Information::default(), OutputFormat::Points);
        assert!(matches!(r, Err(TkeError::FormatTaskMismatch { .. })));
    }

    #[test]
    fn embedding_prompt_has_no_road_block() {
        let es: Vec<Embedding> = (0..3)
            .map(|i| Embedding { key: crate::tpa::PointKey::new("a", i * 10), e: vec![0.5; 32] })
            .collect();
        let road = RoadNetwork::grid(BBox::new(116.0, 39.0, 117.0, 40.0), 3);
        let info = Information { road: Some(&road), weather: None };
        let pr = build_prompt(TaskKind::NF, PromptData::Embeddings(&es), info, OutputFormat::Trajectory).unwrap();
        let f = featurize_prompt(&pr, &norm());
        assert!((f[11] - 0.5).abs() < 1e-15);
        assert!(f[28..31].iter().all(|&v| v == 0.0));
    }
}
