use std::f64::consts::TAU;

use super::{Domain, LatentTrajectory, PairedDemo, TaskDescription, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

pub const FRAME_H: usize = 16;
pub const FRAME_W: usize = 16;
pub const FRAME_C: usize = 3;

const OBJECTS: [&str; 8] = ["cup", "block", "lid", "sponge", "ball", "towel", "bottle", "spoon"];
const VERBS: [[&str; 2]; 4] = [["move", "slide"], ["push", "shift"], ["carry", "bring"], ["drag", "guide"]];
const DIRECTIONS: [&str; 8] = ["right", "to the upper right", "up", "to the upper left", "left", "to the lower left", "down", "to the lower right"];

const HUMAN_SKIN: [f64; 3] = [0.95, 0.62, 0.38];
const ROBOT_METAL: [f64; 3] = [0.30, 0.52, 0.95];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_tasks: usize,
    pub pairs_per_task: usize,
    pub gap: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Added to every pair id so that separately generated sets stay disjoint.
    pub first_pair_id: usize,
}

impl GeneratorConfig {
    pub fn new(n_tasks: usize, pairs_per_task: usize, gap: f64) -> Self {
        GeneratorConfig {
            n_tasks,
            pairs_per_task,
            gap,
            min_len: 8,
            max_len: 24,
            first_pair_id: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 {
            return Err(Error::arg(format!("n_tasks must be >= 2, got {}", self.n_tasks)));
        }
        if self.pairs_per_task < 1 {
            return Err(Error::arg("pairs_per_task must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gap) {
            return Err(Error::arg(format!("gap must lie in [0,1], got {}", self.gap)));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::arg(format!("bad clip length range [{}, {}]", self.min_len, self.max_len)));
        }
        Ok(())
    }
}

pub fn generate_paired_set(rng: &RngState, n_tasks: usize, pairs_per_task: usize, gap: f64) -> Result<Vec<PairedDemo>> {
    generate_with(rng, &GeneratorConfig::new(n_tasks, pairs_per_task, gap))
}

/// Pairs are emitted task-major. Each pair draws from its own forked stream,
/// so the set is identical for every `gap`, apart from the rendering blend.
pub fn generate_with(rng: &RngState, cfg: &GeneratorConfig) -> Result<Vec<PairedDemo>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_tasks * cfg.pairs_per_task);
    for task in 0..cfg.n_tasks {
        for k in 0..cfg.pairs_per_task {
            let pair_id = cfg.first_pair_id + task * cfg.pairs_per_task + k;
            let mut prng = rng.fork(pair_id as u64);
            let scene = Scene::sample(task, cfg, &mut prng);
            let human = VideoClip::new(scene.render(Domain::Human, cfg.gap)?, Domain::Human, task, pair_id)?;
            let robot = VideoClip::new(scene.render(Domain::Robot, cfg.gap)?, Domain::Robot, task, pair_id)?;
            out.push(PairedDemo {
                human,
                robot,
                description: TaskDescription {
                    text: describe(task, prng.below(2)),
                    task_id: task,
                },
                latent: Some(scene.latent),
            });
        }
    }
    Ok(out)
}

fn direction_of(task: usize, n_tasks: usize) -> f64 {
    TAU * task as f64 / n_tasks as f64
}

pub(crate) fn task_name_parts(task: usize) -> (usize, usize, usize) {
    (task % OBJECTS.len(), task % DIRECTIONS.len(), (task / DIRECTIONS.len()) % VERBS.len())
}

fn describe(task: usize, variant: usize) -> String {
    let (obj, dir, verb) = task_name_parts(task);
    format!("{} the {} {}", VERBS[verb][variant], OBJECTS[obj], DIRECTIONS[dir])
}

struct Scene {
    latent: LatentTrajectory,
    object_start: [f64; 2],
    object_color: [f64; 3],
    texture_phase: [f64; 3],
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl Scene {
    fn sample(task: usize, cfg: &GeneratorConfig, rng: &mut RngState) -> Scene {
        let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let theta = direction_of(task, cfg.n_tasks) + rng.uniform_range(-0.15, 0.15);
        let reach = rng.uniform_range(0.24, 0.34);
        let (dx, dy) = (theta.cos(), theta.sin());
        let centre = [0.5 + rng.uniform_range(-0.06, 0.06), 0.5 + rng.uniform_range(-0.06, 0.06)];
        let start = [centre[0] - reach * dx, centre[1] - reach * dy];
        let goal = [centre[0] + reach * dx, centre[1] + reach * dy];
        let bend = if task % 2 == 0 { 1.0 } else { -1.0 } * rng.uniform_range(0.05, 0.2);
        let control = [centre[0] - bend * dy, centre[1] + bend * dx];
        let pace = rng.uniform_range(0.7, 1.4);
        let grasp_at = rng.uniform_range(0.15, 0.3);
        let release_at = rng.uniform_range(0.75, 0.9);

        let mut positions = Vec::with_capacity(len);
        let mut gripper = Vec::with_capacity(len);
        for t in 0..len {
            let s = smoothstep((t as f64 / (len - 1) as f64).powf(pace));
            let a = (1.0 - s) * (1.0 - s);
            let b = 2.0 * s * (1.0 - s);
            let c = s * s;
            let p = [
                (a * start[0] + b * control[0] + c * goal[0]).clamp(0.02, 0.98),
                (a * start[1] + b * control[1] + c * goal[1]).clamp(0.02, 0.98),
            ];
            positions.push(p);
            gripper.push(s >= grasp_at && s <= release_at);
        }
        let object_color = [rng.uniform_range(0.05, 0.95), rng.uniform_range(0.05, 0.95), rng.uniform_range(0.05, 0.95)];
        // small per-pair jitter; the background is otherwise a fixed domain trait
        let texture_phase = [rng.uniform_range(0.0, 0.4), rng.uniform_range(0.0, 0.4), rng.uniform_range(0.0, 0.4)];
        Scene {
            object_start: positions[0],
            latent: LatentTrajectory { positions, gripper },
            object_color,
            texture_phase,
        }
    }

    fn object_position(&self, t: usize) -> [f64; 2] {
        // The object rides with the effector from the first closed-gripper step
        // and stays where it was released.
        let mut pos = self.object_start;
        for s in 0..=t {
            if self.latent.gripper[s] {
                pos = self.latent.positions[s];
            }
        }
        pos
    }

    fn render(&self, domain: Domain, gap: f64) -> Result<Tensor> {
        // `mix` = how far this render moves toward the pure robot look.
        let mix = match domain {
            Domain::Human => 0.0,
            Domain::Robot => gap,
        };
        let len = self.latent.len();
        let mut data = Vec::with_capacity(len * FRAME_H * FRAME_W * FRAME_C);
        let eff_color: Vec<f64> = (0..3).map(|c| lerp(HUMAN_SKIN[c], ROBOT_METAL[c], mix)).collect();
        for t in 0..len {
            let p = self.latent.positions[t];
            let closed = self.latent.gripper[t];
            let obj = self.object_position(t);
            let radius = if closed { 0.11 } else { 0.16 };
            for i in 0..FRAME_H {
                for j in 0..FRAME_W {
                    let (x, y) = ((j as f64 + 0.5) / FRAME_W as f64, (i as f64 + 0.5) / FRAME_H as f64);
                    let human_bg = self.human_background(x, y);
                    let robot_bg = self.robot_background(i, j);
                    let mut px: [f64; 3] = std::array::from_fn(|c| lerp(human_bg[c], robot_bg[c], mix));

                    let (ox, oy) = ((x - obj[0]).abs(), (y - obj[1]).abs());
                    let obj_alpha = soft_edge(0.10 - ox.max(oy));
                    for c in 0..3 {
                        px[c] = lerp(px[c], self.object_color[c], obj_alpha);
                    }

                    let (ex, ey) = (x - p[0], y - p[1]);
                    let disc = soft_edge(radius - (ex * ex + ey * ey).sqrt());
                    let square = soft_edge(radius * 0.85 - ex.abs().max(ey.abs()));
                    let eff_alpha = lerp(disc, square, mix);
                    for c in 0..3 {
                        px[c] = lerp(px[c], eff_color[c], eff_alpha).clamp(0.0, 1.0);
                    }
                    data.extend_from_slice(&px);
                }
            }
        }
        Tensor::from_vec(&[len, FRAME_H, FRAME_W, FRAME_C], data)
    }

    fn human_background(&self, x: f64, y: f64) -> [f64; 3] {
        let [a, b, c] = self.texture_phase;
        let tex = 0.5 + 0.25 * (9.0 * x + a).sin() * (7.0 * y + b).cos() + 0.15 * (13.0 * (x + y) + c).sin();
        [0.35 + 0.12 * tex, 0.28 + 0.10 * tex, 0.22 + 0.06 * tex]
    }

    fn robot_background(&self, i: usize, j: usize) -> [f64; 3] {
        let line = i % 4 == 0 || j % 4 == 0;
        if line {
            [0.62, 0.66, 0.70]
        } else {
            [0.16, 0.18, 0.22]
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Anti-aliased coverage from a signed distance (positive inside).
fn soft_edge(signed: f64) -> f64 {
    (signed / 0.05 + 0.5).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn zero_gap_renders_identical_pairs() {
        let set = generate_paired_set(&RngState::new(7), 3, 2, 0.0).unwrap();
        for p in &set {
            assert_eq!(bits(&p.human.frames), bits(&p.robot.frames));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_paired_set(&RngState::new(7), 2, 3, 0.5).unwrap();
        let b = generate_paired_set(&RngState::new(7), 2, 3, 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(bits(&x.human.frames), bits(&y.human.frames));
            assert_eq!(bits(&x.robot.frames), bits(&y.robot.frames));
            assert_eq!(x.description, y.description);
        }
    }

    #[test]
    fn pairs_are_consistent() {
        let set = generate_paired_set(&RngState::new(1), 4, 3, 0.7).unwrap();
        assert_eq!(set.len(), 12);
        for p in &set {
            p.validate().unwrap();
            let lat = p.latent.as_ref().unwrap();
            assert!((8..=24).contains(&p.human.len()));
            assert_eq!(p.human.len(), lat.len());
            assert!(lat.positions.iter().all(|q| q.iter().all(|v| (0.0..=1.0).contains(v))));
            assert_eq!(p.human.frame_shape(), [FRAME_H, FRAME_W, FRAME_C]);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let r = RngState::new(0);
        assert!(generate_paired_set(&r, 1, 4, 0.5).is_err());
        assert!(generate_paired_set(&r, 2, 0, 0.5).is_err());
        assert!(generate_paired_set(&r, 2, 2, 1.5).is_err());
    }

    #[test]
    fn task_descriptions_differ_between_tasks() {
        let set = generate_paired_set(&RngState::new(2), 8, 1, 0.5).unwrap();
        let mut texts: Vec<_> = set.iter().map(|p| p.description.text.clone()).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 8);
    }
}
