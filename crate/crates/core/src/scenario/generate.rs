use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::plan::plan_motion;
use super::{Agent, AgentClass, DrivingIntent, Scenario, Trajectory, Waypoint, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose2, Rect};

/// Procedural scene families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    /// Four-way junction with corner buildings and cross traffic.
    Intersection,
    /// Two-way road with oncoming traffic.
    Oncoming,
    /// A vehicle hidden from the ego behind a barrier, converging onto the ego's path.
    OccludedCrossing,
}

impl Template {
    pub const ALL: [Template; 3] = [
        Template::Intersection,
        Template::Oncoming,
        Template::OccludedCrossing,
    ];

    fn salt(self) -> u64 {
        match self {
            Template::Intersection => 0x1A7E_5EC7,
            Template::Oncoming => 0x0DC0_4411,
            Template::OccludedCrossing => 0x0CC1_0DED,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::Intersection => "Intersection",
            Template::Oncoming => "Oncoming",
            Template::OccludedCrossing => "OccludedCrossing",
        }
    }
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "intersection" => Ok(Template::Intersection),
            "oncoming" => Ok(Template::Oncoming),
            "occludedcrossing" | "occluded" => Ok(Template::OccludedCrossing),
            _ => Err(Error::UnknownTemplate(s.to_string())),
        }
    }
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub template: Template,
    pub seed: u64,
    /// Total agent count, ego included.
    pub n_agents: usize,
    pub frames: usize,
    pub dt: f64,
    /// Standard deviation (m) of seeded position noise added to non-ego waypoints.
    pub jitter: f64,
}

impl GenerateOptions {
    pub fn new(template: Template, seed: u64, n_agents: usize) -> Self {
        Self {
            template,
            seed,
            n_agents,
            frames: 12,
            dt: super::DEFAULT_DT,
            jitter: 0.0,
        }
    }
}

/// Deterministic scenario for `(template, seed, n_agents)` with default options.
pub fn generate_scenario(template: Template, seed: u64, n_agents: usize) -> Result<Scenario> {
    generate_scenario_with(&GenerateOptions::new(template, seed, n_agents))
}

const BOUND: f64 = 50.0;
const LANE: f64 = 1.75;

/// Rounds to 9 significant decimal digits, the precision of scenario files.
pub(crate) fn q9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { 0.0 } else { v };
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

struct Builder {
    rng: ChaCha8Rng,
    frames: usize,
    dt: f64,
    agents: Vec<Agent>,
}

impl Builder {
    fn speed_for(&mut self, class: AgentClass) -> f64 {
        match class {
            AgentClass::Car => self.rng.random_range(4.0..9.0),
            AgentClass::Truck => self.rng.random_range(3.0..7.0),
            AgentClass::Cyclist => self.rng.random_range(2.0..5.0),
            AgentClass::Pedestrian => self.rng.random_range(1.0..1.8),
        }
    }

    fn random_class(&mut self) -> AgentClass {
        let u: f64 = self.rng.random();
        if u < 0.7 {
            AgentClass::Car
        } else if u < 0.85 {
            AgentClass::Truck
        } else if u < 0.95 {
            AgentClass::Cyclist
        } else {
            AgentClass::Pedestrian
        }
    }

    fn build(&self, class: AgentClass, start: Pose2, speed: f64, intent: DrivingIntent) -> Agent {
        let mut waypoints = vec![Waypoint {
            frame: 0,
            x: start.x,
            y: start.y,
            heading: start.heading,
        }];
        waypoints.extend(plan_motion(start, speed, intent, self.frames - 1, self.dt, 0).waypoints);
        let (length, width) = class.footprint();
        Agent {
            id: self.agents.len() as u32,
            class,
            length,
            width,
            pose: start,
            speed,
            trajectory: Trajectory {
                dt: self.dt,
                waypoints,
            },
        }
    }

    fn fits(&self, agent: &Agent) -> bool {
        let inside = agent
            .trajectory
            .waypoints
            .iter()
            .all(|w| w.x.abs() <= BOUND && w.y.abs() <= BOUND);
        let fp = agent.footprint_at(0).expect("frame 0").bounding_rect();
        inside
            && self.agents.iter().all(|o| {
                !o.footprint_at(0)
                    .expect("frame 0")
                    .bounding_rect()
                    .overlaps(&fp)
            })
    }

    /// Samples candidates until one fits; shrinks speed when paths leave the grid.
    fn add_with(
        &mut self,
        mut sample: impl FnMut(&mut Self) -> (AgentClass, Pose2, f64, DrivingIntent),
    ) {
        for _ in 0..256 {
            let (class, start, mut speed, intent) = sample(self);
            for _ in 0..8 {
                let agent = self.build(class, start, speed, intent);
                if self.fits(&agent) {
                    self.agents.push(agent);
                    return;
                }
                speed *= 0.75;
            }
        }
        // last resort: a parked pedestrian on the far sidewalk
        let id = self.agents.len() as f64;
        let start = Pose2::new(
            -45.0 + 1.5 * (id % 40.0),
            -45.0 + 1.5 * (id / 40.0).floor(),
            0.0,
        );
        let agent = self.build(AgentClass::Pedestrian, start, 0.0, DrivingIntent::Stop);
        self.agents.push(agent);
    }
}

/// Generates a scenario; a pure function of the options.
pub fn generate_scenario_with(opts: &GenerateOptions) -> Result<Scenario> {
    if opts.n_agents == 0 {
        return Err(Error::param("n_agents", "at least the ego is required"));
    }
    if opts.template == Template::OccludedCrossing && opts.n_agents < 2 {
        return Err(Error::param(
            "n_agents",
            "OccludedCrossing needs the ego plus at least one hidden agent",
        ));
    }
    if opts.frames < 2 {
        return Err(Error::param("frames", "at least 2 frames are required"));
    }
    if !(opts.dt > 0.0) {
        return Err(Error::param("dt", "must be positive"));
    }
    if !(opts.jitter >= 0.0) {
        return Err(Error::param("jitter", "must be non-negative"));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(
            opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ opts.template.salt(),
        ),
        frames: opts.frames,
        dt: opts.dt,
        agents: Vec::with_capacity(opts.n_agents),
    };
    let (ego_intent, infra_pose, static_obstacles) = match opts.template {
        Template::Intersection => intersection(&mut b, opts.n_agents),
        Template::Oncoming => oncoming(&mut b, opts.n_agents),
        Template::OccludedCrossing => occluded_crossing(&mut b, opts.n_agents),
    };

    let mut agents = b.agents;
    if opts.jitter > 0.0 {
        let noise = Normal::new(0.0, opts.jitter).expect("valid jitter");
        for a in agents.iter_mut().skip(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.seed ^ (a.id as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407),
            );
            for w in a.trajectory.waypoints.iter_mut().skip(1) {
                w.x = (w.x + noise.sample(&mut rng)).clamp(-BOUND, BOUND);
                w.y = (w.y + noise.sample(&mut rng)).clamp(-BOUND, BOUND);
            }
        }
    }

    let mut scenario = Scenario {
        format_version: FORMAT_VERSION,
        template: Some(opts.template.name().to_string()),
        seed: opts.seed,
        frames: opts.frames,
        ego_id: 0,
        ego_intent,
        infra_pose,
        static_obstacles,
        agents,
    };
    quantize(&mut scenario);
    scenario.validate()?;
    Ok(scenario)
}

pub(crate) fn quantize(s: &mut Scenario) {
    let qp = |p: &mut Pose2| {
        p.x = q9(p.x);
        p.y = q9(p.y);
        p.heading = q9(p.heading);
    };
    qp(&mut s.infra_pose);
    for r in &mut s.static_obstacles {
        r.x_min = q9(r.x_min);
        r.y_min = q9(r.y_min);
        r.x_max = q9(r.x_max);
        r.y_max = q9(r.y_max);
    }
    for a in &mut s.agents {
        a.length = q9(a.length);
        a.width = q9(a.width);
        a.speed = q9(a.speed);
        qp(&mut a.pose);
        a.trajectory.dt = q9(a.trajectory.dt);
        for w in &mut a.trajectory.waypoints {
            w.x = q9(w.x);
            w.y = q9(w.y);
            w.heading = q9(w.heading);
        }
    }
}

fn push_ego(b: &mut Builder, start: Pose2, speed: f64, intent: DrivingIntent) {
    let ego = b.build(AgentClass::Car, start, speed, intent);
    b.agents.push(ego);
}

fn pick_straight_or_turn(b: &mut Builder) -> DrivingIntent {
    let u: f64 = b.rng.random();
    if u < 0.75 {
        DrivingIntent::GoStraight
    } else if u < 0.875 {
        DrivingIntent::TurnLeft
    } else {
        DrivingIntent::TurnRight
    }
}

fn intersection(b: &mut Builder, n: usize) -> (DrivingIntent, Pose2, Vec<Rect>) {
    let intent = DrivingIntent::ALL[b.rng.random_range(0..4)];
    let ego_y = -b.rng.random_range(14.0..22.0);
    let ego_speed = b.rng.random_range(5.0..8.0);
    push_ego(b, Pose2::new(LANE, ego_y, FRAC_PI_2), ego_speed, intent);

    let setback = b.rng.random_range(6.0f64..8.0);
    let depth = b.rng.random_range(20.0..35.0);
    let obstacles = [(1.0f64, 1.0f64), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|&(sx, sy)| {
            let (xa, xb) = (sx * setback, sx * (setback + depth));
            let (ya, yb) = (sy * setback, sy * (setback + depth));
            Rect::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb))
        })
        .collect();
    let corner = b.rng.random_range(0..4);
    let (sx, sy) = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)][corner];
    let infra_xy = Point2::new(sx * (setback - 1.0), sy * (setback - 1.0));
    let infra = Pose2::new(infra_xy.x, infra_xy.y, (-infra_xy.y).atan2(-infra_xy.x));

    for _ in 1..n {
        b.add_with(|b| {
            let class = b.random_class();
            let speed = b.speed_for(class);
            if class == AgentClass::Pedestrian {
                let side = if b.rng.random::<bool>() { 1.0 } else { -1.0 };
                let y = b.rng.random_range(-30.0..30.0);
                let heading = if b.rng.random::<bool>() {
                    FRAC_PI_2
                } else {
                    -FRAC_PI_2
                };
                return (
                    class,
                    Pose2::new(side * (setback - 1.5), y, heading),
                    speed,
                    DrivingIntent::GoStraight,
                );
            }
            let intent = pick_straight_or_turn(b);
            let d = b.rng.random_range(12.0..35.0);
            let start = match b.rng.random_range(0..4) {
                0 => Pose2::new(d, LANE, PI),
                1 => Pose2::new(-d, -LANE, 0.0),
                2 => Pose2::new(-LANE, d, -FRAC_PI_2),
                _ => Pose2::new(LANE, b.rng.random_range(ego_y + 8.0..10.0), FRAC_PI_2),
            };
            (class, start, speed, intent)
        });
    }
    (intent, infra, obstacles)
}

fn oncoming(b: &mut Builder, n: usize) -> (DrivingIntent, Pose2, Vec<Rect>) {
    let intent = if b.rng.random::<bool>() {
        DrivingIntent::TurnLeft
    } else {
        DrivingIntent::GoStraight
    };
    let ego_y = -b.rng.random_range(15.0..25.0);
    let ego_speed = b.rng.random_range(6.0..9.0);
    push_ego(b, Pose2::new(LANE, ego_y, FRAC_PI_2), ego_speed, intent);

    let jitter = b.rng.random_range(0.0..3.0);
    let obstacles = vec![
        Rect::new(8.0 + jitter, -45.0, 30.0, -10.0),
        Rect::new(8.0, 10.0 + jitter, 30.0, 45.0),
        Rect::new(-30.0, -45.0, -9.0 - jitter, -5.0),
        Rect::new(-30.0, 12.0, -9.0, 45.0 - jitter),
    ];
    let infra = Pose2::new(
        b.rng.random_range(6.0..7.0),
        b.rng.random_range(-5.0..5.0),
        PI,
    );

    for _ in 1..n {
        b.add_with(|b| {
            let class = b.random_class();
            let speed = b.speed_for(class);
            let u: f64 = b.rng.random();
            let start = if u < 0.6 {
                Pose2::new(-LANE, b.rng.random_range(5.0..45.0), -FRAC_PI_2)
            } else if u < 0.8 {
                Pose2::new(-3.0 * LANE, b.rng.random_range(0.0..45.0), -FRAC_PI_2)
            } else {
                Pose2::new(LANE, b.rng.random_range(ego_y + 10.0..30.0), FRAC_PI_2)
            };
            (class, start, speed, DrivingIntent::GoStraight)
        });
    }
    (intent, infra, obstacles)
}

/// Ego drives straight; a car in a parallel lane screened off by a barrier keeps
/// pace within a few meters, then cuts across the ego's lane after the barrier ends.
fn occluded_crossing(b: &mut Builder, n: usize) -> (DrivingIntent, Pose2, Vec<Rect>) {
    let v = b.rng.random_range(6.0..9.0);
    let ego_y = -b.rng.random_range(20.0..26.0);
    push_ego(
        b,
        Pose2::new(LANE, ego_y, FRAC_PI_2),
        v,
        DrivingIntent::GoStraight,
    );

    let ahead = b.rng.random_range(1.5..2.8) * if b.rng.random::<bool>() { 1.0 } else { -1.0 };
    let hidden_x = LANE + 4.0;
    let hidden_y = ego_y + ahead;
    let merge_frame = 6usize.min(b.frames - 1);
    let lateral_speed = 3.0;
    let dt = b.dt;
    let mut waypoints = Vec::with_capacity(b.frames);
    let cut_heading = v.atan2(-lateral_speed);
    for f in 0..b.frames {
        let straight = f.min(merge_frame) as f64 * dt;
        let cut = f.saturating_sub(merge_frame) as f64 * dt;
        waypoints.push(Waypoint {
            frame: f as u32,
            x: hidden_x - lateral_speed * cut,
            y: hidden_y + v * (straight + cut),
            heading: if f > merge_frame {
                cut_heading
            } else {
                FRAC_PI_2
            },
        });
    }
    let (length, width) = AgentClass::Car.footprint();
    b.agents.push(Agent {
        id: 1,
        class: AgentClass::Car,
        length,
        width,
        pose: Pose2::new(hidden_x, hidden_y, FRAC_PI_2),
        speed: v,
        trajectory: Trajectory { dt, waypoints },
    });

    let barrier_end = hidden_y + v * merge_frame as f64 * dt + 3.0;
    let obstacles = vec![Rect::new(LANE + 1.4, ego_y - 30.0, LANE + 1.8, barrier_end)];
    let infra_y = hidden_y + 1.5 * v + b.rng.random_range(10.0..16.0);
    let infra = Pose2::new(b.rng.random_range(14.0..18.0), infra_y, PI);

    for _ in 2..n {
        b.add_with(|b| {
            let class = b.random_class();
            let speed = b.speed_for(class);
            let start = match class {
                AgentClass::Pedestrian => {
                    Pose2::new(-8.5, b.rng.random_range(-40.0..40.0), -FRAC_PI_2)
                }
                _ if b.rng.random::<bool>() => {
                    Pose2::new(-LANE, b.rng.random_range(0.0..45.0), -FRAC_PI_2)
                }
                _ => Pose2::new(-3.0 * LANE, b.rng.random_range(0.0..45.0), -FRAC_PI_2),
            };
            (class, start, speed, DrivingIntent::GoStraight)
        });
    }
    (DrivingIntent::GoStraight, infra, obstacles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::scenario_to_string;

    fn segments_cross(a0: Point2, a1: Point2, b0: Point2, b1: Point2) -> bool {
        let cross =
            |o: Point2, p: Point2, q: Point2| (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
        let d1 = cross(b0, b1, a0);
        let d2 = cross(b0, b1, a1);
        let d3 = cross(a0, a1, b0);
        let d4 = cross(a0, a1, b1);
        (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0)
    }

    fn paths_cross(a: &Agent, b: &Agent) -> bool {
        let pa: Vec<Point2> = a
            .trajectory
            .waypoints
            .iter()
            .map(|w| w.position())
            .collect();
        let pb: Vec<Point2> = b
            .trajectory
            .waypoints
            .iter()
            .map(|w| w.position())
            .collect();
        pa.windows(2).any(|s| {
            pb.windows(2)
                .any(|t| segments_cross(s[0], s[1], t[0], t[1]))
        })
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scenario(Template::Intersection, 7, 4).unwrap();
        let b = generate_scenario(Template::Intersection, 7, 4).unwrap();
        assert_eq!(
            scenario_to_string(&a).unwrap(),
            scenario_to_string(&b).unwrap()
        );
        let c = generate_scenario(Template::Intersection, 8, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_agent_is_ego_only() {
        let s = generate_scenario(Template::Intersection, 3, 1).unwrap();
        assert_eq!(s.agents.len(), 1);
        assert_eq!(s.agents[0].id, s.ego_id);
    }

    #[test]
    fn unknown_template_name() {
        assert!(matches!(
            "roundabout".parse::<Template>(),
            Err(Error::UnknownTemplate(_))
        ));
        assert_eq!(
            "occluded-crossing".parse::<Template>().unwrap(),
            Template::OccludedCrossing
        );
    }

    #[test]
    fn occluded_crossing_requires_hidden_agent() {
        assert!(generate_scenario(Template::OccludedCrossing, 1, 1).is_err());
    }

    #[test]
    fn occluded_crossing_agent_crosses_ego_path_behind_obstacle() {
        for seed in 0..20 {
            let s = generate_scenario(Template::OccludedCrossing, seed, 5).unwrap();
            let ego = s.ego();
            let crossing: Vec<&Agent> = s.others().filter(|a| paths_cross(ego, a)).collect();
            assert!(!crossing.is_empty(), "seed {seed}");
            let hidden = crossing.iter().any(|a| {
                let (e, t) = (ego.position_at(0).unwrap(), a.position_at(0).unwrap());
                s.static_obstacles
                    .iter()
                    .any(|r| r.intersects_segment(e, t))
            });
            assert!(hidden, "seed {seed}");
        }
    }

    #[test]
    fn waypoints_stay_inside_default_grid() {
        for t in Template::ALL {
            for seed in 0..30 {
                let s = generate_scenario(t, seed, 8).unwrap();
                assert_eq!(s.agents.len(), 8);
                for a in &s.agents {
                    assert_eq!(a.trajectory.len(), s.frames);
                    for w in &a.trajectory.waypoints {
                        assert!(
                            w.x.abs() < 51.2 && w.y.abs() < 51.2,
                            "{t} seed {seed} agent {}",
                            a.id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn jitter_is_seeded() {
        let mut o = GenerateOptions::new(Template::Oncoming, 4, 4);
        o.jitter = 0.2;
        let a = generate_scenario_with(&o).unwrap();
        assert_eq!(a, generate_scenario_with(&o).unwrap());
        assert_ne!(a, generate_scenario(Template::Oncoming, 4, 4).unwrap());
        // ego untouched
        assert_eq!(
            a.ego(),
            generate_scenario(Template::Oncoming, 4, 4).unwrap().ego()
        );
    }

    #[test]
    fn q9_keeps_nine_digits() {
        assert_eq!(q9(1.234_567_891_23), 1.234_567_89);
        assert_eq!(q9(-0.000_123_456_789_9), -0.000_123_456_79);
        assert_eq!(q9(0.0), 0.0);
    }
}
