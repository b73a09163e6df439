use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::schedule::{context_window, route_task, Route};
use super::{Dataset, FpoError, RunConfig, Sample};
use crate::surrogate::{ClassLabel, Token, Vocab};
use crate::tasks::{
    detect_gaps, label_tmi, label_tul, oracle_anomaly, oracle_map_match, oracle_noise_filter, oracle_segment,
    oracle_stay_points, simplify_mask, stay_runs, TaskKind, TaskOutput,
};
use crate::tke::{
    build_prompt, featurize_prompt, point_features, pooled_features, Information, PointView, PromptData,
    POINT_FEATURES, PROMPT_FEATURES,
};
use crate::traj::{lerp_at, partition_trajectory, SpatioTemporalPoint};

pub const SLM_INPUT_DIM: usize = PROMPT_FEATURES + POINT_FEATURES;

/// Time stamp used by whole-trajectory items.
pub const POOLED_T: i64 = i64::MIN;

/// Identifies one unit of work: a task applied to a point, a missing
/// timestamp or a whole trajectory of the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub task: TaskKind,
    pub traj: u32,
    pub t: i64,
}

/// Maximal run of one trajectory's consecutive points inside a client's region.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSegment {
    pub traj: usize,
    /// Index of the first point in the parent trajectory.
    pub start: usize,
    pub points: Vec<SpatioTemporalPoint>,
    /// Per point: whether its context window reaches another client.
    pub cross: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapSite {
    pub seg: usize,
    /// Position of the preceding observed point within the segment.
    pub after: usize,
    pub t: i64,
    /// The following observed point belongs to the same segment.
    pub next_local: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ItemSite {
    Point { seg: usize, pos: usize },
    Gap(GapSite),
    Pooled { segs: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub key: ItemKey,
    pub site: ItemSite,
    pub cross: bool,
    /// Oracle label as a vocabulary id.
    pub target: usize,
    pub prompt: Vec<f64>,
}

/// What one client sees of a split and the items it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientView {
    pub client: usize,
    pub segments: Vec<LocalSegment>,
    /// Sorted by key.
    pub items: Vec<Item>,
}

impl ClientView {
    /// Cross-client points as (segment, position), ordered by (traj, t).
    pub fn cross_points(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self
            .segments
            .iter()
            .enumerate()
            .flat_map(|(s, seg)| seg.cross.iter().enumerate().filter(|(_, &c)| c).map(move |(p, _)| (s, p)))
            .collect();
        v.sort_by_key(|&(s, p)| (self.segments[s].traj, self.segments[s].points[p].t));
        v
    }

    /// Missing timestamps of cross-client gap items, ordered by (traj, t), deduplicated.
    pub fn cross_gaps(&self) -> Vec<(usize, i64)> {
        let mut v: Vec<(usize, i64)> = self
            .items
            .iter()
            .filter(|it| it.cross)
            .filter_map(|it| match it.site {
                ItemSite::Gap(g) => Some((self.segments[g.seg].traj, g.t)),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn point_count(&self) -> usize {
        self.segments.iter().map(|s| s.points.len()).sum()
    }

    /// Input row of one item. `contexts` holds decoded server estimates keyed
    /// by (traj, t).
    pub fn features(
        &self,
        item: &Item,
        contexts: &BTreeMap<(usize, i64), SpatioTemporalPoint>,
        ds: &Dataset,
    ) -> [f64; SLM_INPUT_DIM] {
        let mut out = [0.0; SLM_INPUT_DIM];
        out[..PROMPT_FEATURES].copy_from_slice(&item.prompt);
        fn view<'a>(
            seg: &'a LocalSegment,
            pos: usize,
            contexts: &BTreeMap<(usize, i64), SpatioTemporalPoint>,
            ds: &'a Dataset,
        ) -> PointView<'a> {
            PointView {
                points: &seg.points,
                index: pos,
                cross: seg.cross[pos],
                context: contexts.get(&(seg.traj, seg.points[pos].t)).copied(),
                norm: &ds.norm,
            }
        }
        let block = match &item.site {
            ItemSite::Point { seg, pos } => point_features(&view(&self.segments[*seg], *pos, contexts, ds)),
            ItemSite::Gap(g) => {
                let seg = &self.segments[g.seg];
                let a = seg.points[g.after];
                let virt = if g.next_local {
                    let (lon, lat) = lerp_at(&a, &seg.points[g.after + 1], g.t);
                    SpatioTemporalPoint::new(lon, lat, g.t)
                } else if let Some(c) = contexts.get(&(seg.traj, g.t)) {
                    SpatioTemporalPoint::new(c.lon, c.lat, g.t)
                } else if g.after > 0 {
                    // Extrapolate the last local velocity.
                    let p = seg.points[g.after - 1];
                    let f = (g.t - a.t) as f64 / (a.t - p.t).max(1) as f64;
                    let b = &ds.norm.bbox;
                    SpatioTemporalPoint::new(
                        (a.lon + f * (a.lon - p.lon)).clamp(b.lon_min, b.lon_max),
                        (a.lat + f * (a.lat - p.lat)).clamp(b.lat_min, b.lat_max),
                        g.t,
                    )
                } else {
                    SpatioTemporalPoint::new(a.lon, a.lat, g.t)
                };
                let mut pts = seg.points.clone();
                pts.insert(g.after + 1, virt);
                point_features(&PointView {
                    points: &pts,
                    index: g.after + 1,
                    cross: item.cross,
                    context: contexts.get(&(seg.traj, g.t)).copied(),
                    norm: &ds.norm,
                })
            }
            ItemSite::Pooled { segs } => {
                let blocks: Vec<_> = segs
                    .iter()
                    .flat_map(|&s| (0..self.segments[s].points.len()).map(move |p| (s, p)))
                    .map(|(s, p)| point_features(&view(&self.segments[s], p, contexts, ds)))
                    .collect();
                pooled_features(&blocks)
            }
        };
        out[PROMPT_FEATURES..].copy_from_slice(&block);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedSplit {
    /// Owning client of every point, per trajectory.
    pub owners: Vec<Vec<usize>>,
    pub clients: Vec<ClientView>,
}

impl FederatedSplit {
    pub fn item_count(&self) -> usize {
        self.clients.iter().map(|c| c.items.len()).sum()
    }

    /// Oracle labels of every cross-client item, as handed to the server's
    /// label loss.
    pub fn cross_labels(&self) -> BTreeMap<ItemKey, usize> {
        self.clients.iter().flat_map(|c| &c.items).filter(|it| it.cross).map(|it| (it.key, it.target)).collect()
    }
}

/// Tokens a task may answer with.
pub fn candidate_tokens(task: TaskKind, vocab: &Vocab) -> Vec<usize> {
    let toks: Vec<Token> = match task {
        TaskKind::NF | TaskKind::TSim => vec![Token::Keep, Token::Drop],
        TaskKind::SPD => vec![Token::Class(ClassLabel::Stay), Token::Class(ClassLabel::Move)],
        TaskKind::AD => vec![Token::Class(ClassLabel::Normal), Token::Class(ClassLabel::Anomaly)],
        TaskKind::TMI => [ClassLabel::Walk, ClassLabel::Bike, ClassLabel::Bus, ClassLabel::Car].map(Token::Class).to_vec(),
        TaskKind::TUL => (0..vocab.user_slots).map(Token::User).collect(),
        TaskKind::TSeg => vec![Token::Segment(0), Token::Segment(1)],
        TaskKind::MM => (0..vocab.segment_slots).map(Token::Segment).collect(),
        TaskKind::TI | TaskKind::TR => (0..vocab.grid * vocab.grid).map(Token::Cell).collect(),
    };
    toks.into_iter().map(|t| vocab.id(t)).collect()
}

/// Positive class of binary tasks; `None` for macro-averaged ones and TSim.
pub fn positive_token(task: TaskKind, vocab: &Vocab) -> Option<usize> {
    match task {
        TaskKind::NF => Some(vocab.id(Token::Drop)),
        TaskKind::SPD => Some(vocab.id(Token::Class(ClassLabel::Stay))),
        TaskKind::AD => Some(vocab.id(Token::Class(ClassLabel::Anomaly))),
        TaskKind::TSeg => Some(vocab.id(Token::Segment(1))),
        _ => None,
    }
}

enum Labels {
    Points(Vec<usize>),
    Gaps(Vec<(i64, usize)>),
    Pooled(usize),
}

fn cell_token(p: (f64, f64), ds: &Dataset, vocab: &Vocab) -> usize {
    let b = &ds.norm.bbox;
    let x = (p.0 - b.lon_min) / (b.lon_max - b.lon_min);
    let y = (p.1 - b.lat_min) / (b.lat_max - b.lat_min);
    vocab.id(Token::Cell(vocab.cell_of(x, y)))
}

fn gap_labels(s: &Sample, times: &[i64], ds: &Dataset, vocab: &Vocab) -> Vec<(i64, usize)> {
    let pts = &s.traj.points;
    times
        .iter()
        .filter_map(|&t| {
            let k = pts.partition_point(|p| p.t < t);
            (k > 0 && k < pts.len() && pts[k].t != t).then(|| (t, cell_token(lerp_at(&pts[k - 1], &pts[k], t), ds, vocab)))
        })
        .collect()
}

fn labels(task: TaskKind, s: &Sample, ds: &Dataset, cfg: &RunConfig, vocab: &Vocab) -> Result<Labels, FpoError> {
    let th = &cfg.thresholds;
    let tr = &s.traj;
    let n = tr.len();
    let yes_no = |flags: Vec<bool>, yes: Token, no: Token| flags.into_iter().map(|f| vocab.id(if f { yes } else { no })).collect();
    Ok(match task {
        TaskKind::NF => Labels::Points(yes_no(oracle_noise_filter(tr, th.noise_speed)?.keep, Token::Keep, Token::Drop)),
        TaskKind::TSim => Labels::Points(yes_no(simplify_mask(tr, th.simplify_epsilon)?, Token::Keep, Token::Drop)),
        TaskKind::SPD => {
            let mut stay = vec![false; n];
            for r in stay_runs(tr, th.stay_distance, th.stay_time)? {
                stay[r.start..=r.end].iter_mut().for_each(|f| *f = true);
            }
            Labels::Points(yes_no(stay, Token::Class(ClassLabel::Stay), Token::Class(ClassLabel::Move)))
        }
        TaskKind::MM => match oracle_map_match(tr, &ds.road)? {
            TaskOutput::TrajectoryOut(a) => Labels::Points(
                a.segment_ids.unwrap_or_default().into_iter().map(|id| vocab.id(Token::Segment(id as usize))).collect(),
            ),
            _ => unreachable!("map matching returns a trajectory"),
        },
        TaskKind::TSeg => {
            let stays = match oracle_stay_points(tr, th.stay_distance, th.stay_time)? {
                TaskOutput::Points(p) => p,
                _ => unreachable!("stay detection returns points"),
            };
            let mut boundary = vec![false; n];
            if let TaskOutput::TrajectoryOut(a) = oracle_segment(tr, &stays) {
                for b in a.boundaries.unwrap_or_default() {
                    boundary[b] = true;
                }
            }
            Labels::Points(yes_no(boundary, Token::Segment(1), Token::Segment(0)))
        }
        TaskKind::TI => Labels::Gaps(gap_labels(s, &s.dropped, ds, vocab)),
        TaskKind::TR => Labels::Gaps(gap_labels(s, &detect_gaps(tr, th.sampling_interval), ds, vocab)),
        TaskKind::AD => {
            let label = match oracle_anomaly(tr, &s.clean, th.anomaly_detour)? {
                TaskOutput::Classification(c) => c,
                _ => unreachable!("classification"),
            };
            let tok = if label == 1 { ClassLabel::Anomaly } else { ClassLabel::Normal };
            Labels::Pooled(vocab.id(Token::Class(tok)))
        }
        TaskKind::TMI => match label_tmi(&s.meta) {
            TaskOutput::Classification(c) => {
                Labels::Pooled(vocab.id(Token::Class([ClassLabel::Walk, ClassLabel::Bike, ClassLabel::Bus, ClassLabel::Car][c])))
            }
            _ => unreachable!("classification"),
        },
        TaskKind::TUL => match label_tul(&s.meta) {
            TaskOutput::Classification(c) => Labels::Pooled(vocab.id(Token::User(c))),
            _ => unreachable!("classification"),
        },
    })
}

/// Client holding most of a trajectory's points; ties go to the lower id.
fn majority_owner(owners: &[usize], clients: usize) -> usize {
    let mut counts = vec![0usize; clients];
    owners.iter().for_each(|&c| counts[c] += 1);
    (0..clients).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("at least one client")
}

/// Partitions every trajectory of `samples` over the clients, routes each
/// task item and attaches oracle labels and prompt features.
pub fn build_split(
    samples: &[Sample],
    ds: &Dataset,
    tasks: &[TaskKind],
    cfg: &RunConfig,
    vocab: &Vocab,
) -> Result<FederatedSplit, FpoError> {
    let c = ds.partition.num_clients();
    let radius = cfg.train.context_radius;
    let mut clients: Vec<ClientView> = (0..c).map(|client| ClientView { client, segments: Vec::new(), items: Vec::new() }).collect();
    let mut owners_all = Vec::with_capacity(samples.len());

    for (ti, s) in samples.iter().enumerate() {
        let subs = partition_trajectory(&s.traj, &ds.partition)?;
        let owners: Vec<usize> = subs.iter().flat_map(|sub| std::iter::repeat(sub.client_id).take(sub.points.len())).collect();
        let cross_pt: Vec<bool> =
            (0..owners.len()).map(|g| route_task(context_window(&owners, g, radius), owners[g]) == Route::CrossClient).collect();
        // (client, segment index in that client) of every point.
        let mut loc = Vec::with_capacity(owners.len());
        let mut start = 0;
        let mut segs_of: Vec<Vec<usize>> = vec![Vec::new(); c];
        for sub in &subs {
            let view = &mut clients[sub.client_id];
            let id = view.segments.len();
            segs_of[sub.client_id].push(id);
            let len = sub.points.len();
            view.segments.push(LocalSegment {
                traj: ti,
                start,
                points: sub.points.clone(),
                cross: cross_pt[start..start + len].to_vec(),
            });
            loc.extend((0..len).map(|p| (sub.client_id, id, p)));
            start += len;
        }

        let info = Information { road: Some(&ds.road), weather: Some(s.weather) };
        let prompt_for = |task: TaskKind, pts: &[SpatioTemporalPoint]| -> Result<Vec<f64>, FpoError> {
            Ok(featurize_prompt(&build_prompt(task, PromptData::Points(pts), info, task.format())?, &ds.norm))
        };
        for &task in tasks {
            match labels(task, s, ds, cfg, vocab)? {
                Labels::Points(ls) => {
                    let mut cache: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
                    for (g, &target) in ls.iter().enumerate() {
                        let (cl, seg, pos) = loc[g];
                        if !cache.contains_key(&(cl, seg)) {
                            let p = prompt_for(task, &clients[cl].segments[seg].points)?;
                            cache.insert((cl, seg), p);
                        }
                        clients[cl].items.push(Item {
                            key: ItemKey { task, traj: ti as u32, t: s.traj.points[g].t },
                            site: ItemSite::Point { seg, pos },
                            cross: cross_pt[g],
                            target,
                            prompt: cache[&(cl, seg)].clone(),
                        });
                    }
                }
                Labels::Gaps(ls) => {
                    for (t, target) in ls {
                        let b = s.traj.points.partition_point(|p| p.t < t);
                        let a = b - 1;
                        let (cl, seg, pos) = loc[a];
                        let cross = route_task(&[owners[a], owners[b]], owners[a]) == Route::CrossClient;
                        let next_local = loc[b].0 == cl && loc[b].1 == seg;
                        let prompt = prompt_for(task, &clients[cl].segments[seg].points)?;
                        clients[cl].items.push(Item {
                            key: ItemKey { task, traj: ti as u32, t },
                            site: ItemSite::Gap(GapSite { seg, after: pos, t, next_local }),
                            cross,
                            target,
                            prompt,
                        });
                    }
                }
                Labels::Pooled(target) => {
                    let owner = majority_owner(&owners, c);
                    let segs = segs_of[owner].clone();
                    let pts: Vec<SpatioTemporalPoint> =
                        segs.iter().flat_map(|&sg| clients[owner].segments[sg].points.iter().copied()).collect();
                    let prompt = prompt_for(task, &pts)?;
                    clients[owner].items.push(Item {
                        key: ItemKey { task, traj: ti as u32, t: POOLED_T },
                        site: ItemSite::Pooled { segs },
                        cross: route_task(&owners, owner) == Route::CrossClient,
                        target,
                        prompt,
                    });
                }
            }
        }
        owners_all.push(owners);
    }
    for v in &mut clients {
        v.items.sort_by_key(|it| it.key);
    }
    Ok(FederatedSplit { owners: owners_all, clients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpo::build_dataset;
    use crate::tke::Weather;
    use crate::tke::WeatherCondition;
    use crate::traj::{RegionPartition, SynthMeta, Trajectory};

    fn tiny() -> (RunConfig, Dataset) {
        let cfg = RunConfig::default();
        let mut ds = build_dataset(&cfg).unwrap();
        // One trajectory walking west to east along the middle latitude:
        // three points on client 0's side, three on client 1's.
        let b = cfg.data.bbox;
        let lat = b.lat_min + 0.25 * (b.lat_max - b.lat_min);
        let lon = |k: f64| b.lon_min + k * (b.lon_max - b.lon_min) / 8.0;
        let pts: Vec<SpatioTemporalPoint> = [1.0, 2.0, 3.0, 5.0, 6.0, 7.0]
            .iter()
            .enumerate()
            .map(|(i, &k)| SpatioTemporalPoint::new(lon(k), lat, ds.norm.t_min + 10 * i as i64 + if i >= 3 { 10 } else { 0 }))
            .collect();
        let traj = Trajectory::new("x", "u000", pts).unwrap();
        let sample = Sample {
            clean: traj.clone(),
            traj,
            meta: SynthMeta { user_index: 0, nominal_speed: 1.0 },
            weather: Weather { condition: WeatherCondition::Sunny, temperature_c: 20.0 },
            dropped: vec![ds.norm.t_min + 10, ds.norm.t_min + 30],
        };
        ds.train = vec![sample];
        ds.partition = RegionPartition::grid(b, 2, 2).unwrap();
        (cfg, ds)
    }

    #[test]
    fn boundary_gap_is_cross_and_interior_is_local() {
        let (cfg, ds) = tiny();
        let vocab = Vocab::default();
        // The first dropped time is before point 1 in the data (t+10 is present), so only t+30 is a gap.
        let split = build_split(&ds.train, &ds, &[TaskKind::TI, TaskKind::NF], &cfg, &vocab).unwrap();
        assert_eq!(split.owners[0], vec![0, 0, 0, 1, 1, 1]);
        let gaps: Vec<&Item> = split.clients[0].items.iter().filter(|i| i.key.task == TaskKind::TI).collect();
        assert_eq!(gaps.len(), 1);
        assert!(gaps[0].cross);
        // Radius 2: points 1..=4 see the other side, 0 and 5 do not.
        let cross: Vec<bool> = split.clients.iter().flat_map(|c| c.items.iter().filter(|i| i.key.task == TaskKind::NF)).map(|i| i.cross).collect();
        assert_eq!(cross, vec![false, true, true, true, true, false]);
        assert_eq!(split.clients[0].cross_gaps().len(), 1);
        assert_eq!(split.clients[1].cross_points().len(), 2);
    }

    #[test]
    fn pooled_owner_takes_majority() {
        assert_eq!(majority_owner(&[1, 1, 0, 0], 2), 0);
        assert_eq!(majority_owner(&[1, 1, 1, 0], 2), 1);
        let (cfg, ds) = tiny();
        let split = build_split(&ds.train, &ds, &[TaskKind::TMI], &cfg, &Vocab::default()).unwrap();
        let it = &split.clients[0].items[0];
        assert!(it.cross);
        assert_eq!(it.key.t, POOLED_T);
        assert_eq!(it.target, Vocab::default().id(Token::Class(ClassLabel::Walk)));
    }

    #[test]
    fn every_point_gets_one_item_per_point_task() {
        let cfg = RunConfig::default();
        let ds = build_dataset(&cfg).unwrap();
        let vocab = Vocab::default();
        let split = build_split(&ds.train, &ds, &cfg.tasks, &cfg, &vocab).unwrap();
        let points: usize = ds.train.iter().map(|s| s.traj.len()).sum();
        assert_eq!(split.item_count(), points * cfg.tasks.len());
        let c0 = &split.clients[0];
        let f = c0.features(&c0.items[0], &BTreeMap::new(), &ds);
        assert!(f.iter().all(|v| v.is_finite()));
        for it in split.clients.iter().flat_map(|c| &c.items) {
            assert!(candidate_tokens(it.key.task, &vocab).contains(&it.target));
        }
    }
}
