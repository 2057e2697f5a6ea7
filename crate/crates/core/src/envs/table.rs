use super::{EnvConfig, StepOutcome};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{Action, ActionBounds, Observation, Task};

/// `[ex, ey, g, ox, oy, tx, ty]`
pub const TABLE_OBS_DIM: usize = 7;

const TASKS: [(&str, [f32; 2]); 2] = [("place-left", [0.2, 0.5]), ("place-right", [0.8, 0.5])];

// Reset samples positions away from the walls.
const MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct TableSimState {
    pub effector: [f32; 2],
    pub gripper_closed: bool,
    pub object: [f32; 2],
    /// A closed gripper coincident with the object holds it.
    pub attached: bool,
    pub target: [f32; 2],
    pub step_count: usize,
}

impl TableSimState {
    pub fn effector_object_distance(&self) -> f32 {
        dist(self.effector, self.object)
    }

    pub fn object_target_distance(&self) -> f32 {
        dist(self.object, self.target)
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp01(p: [f32; 2]) -> [f32; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

pub(super) fn grasp_trigger(
    state: &TableSimState,
    grasp_radius: f32,
    p_grasp: f64,
    rng: &mut RngStream,
) -> bool {
    if state.gripper_closed || state.effector_object_distance() > grasp_radius {
        return false;
    }
    rng.bernoulli(p_grasp)
}

#[derive(Debug, Clone)]
pub struct TableSim {
    cfg: EnvConfig,
    bounds: ActionBounds,
    state: TableSimState,
    task: Task,
    done: bool,
    success: bool,
}

impl TableSim {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        let l = cfg.action_limit;
        let bounds = ActionBounds::new(vec![-l, -l, -1.0], vec![l, l, 1.0])?;
        let task = Task::new(0, TASKS[0].0, "table_sim");
        Ok(TableSim {
            cfg,
            bounds,
            state: TableSimState {
                effector: [0.5, 0.5],
                gripper_closed: false,
                object: [0.5, 0.5],
                attached: false,
                target: TASKS[0].1,
                step_count: 0,
            },
            task,
            done: false,
            success: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    pub fn state(&self) -> &TableSimState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    pub fn tasks(&self) -> Vec<Task> {
        TASKS
            .iter()
            .enumerate()
            .map(|(i, (name, _))| Task::new(i as u32, *name, "table_sim"))
            .collect()
    }

    pub fn target_for(&self, task: &Task) -> Result<[f32; 2]> {
        if task.env_name != "table_sim" {
            return Err(Error::invalid(format!("task {:?} is not a table_sim task", task.description)));
        }
        TASKS
            .get(task.id as usize)
            .filter(|(name, _)| *name == task.description)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::invalid(format!("unknown table_sim task {}", task.id)))
    }

    pub fn reset(&mut self, task: &Task, rng: &mut RngStream) -> Result<Observation> {
        let target = self.target_for(task)?;
        let min_sep = 2.0 * self.cfg.target_radius;
        let mut sample = || {
            [
                rng.uniform_range(MARGIN, 1.0 - MARGIN) as f32,
                rng.uniform_range(MARGIN, 1.0 - MARGIN) as f32,
            ]
        };
        let object = loop {
            let p = sample();
            if dist(p, target) >= min_sep {
                break p;
            }
        };
        let effector = loop {
            let p = sample();
            if dist(p, object) >= min_sep {
                break p;
            }
        };
        self.set_state(
            task.clone(),
            TableSimState {
                effector,
                gripper_closed: false,
                object,
                attached: false,
                target,
                step_count: 0,
            },
        );
        Ok(self.observe())
    }

    /// Place the environment in an explicit state.
    pub fn set_state(&mut self, task: Task, state: TableSimState) {
        self.task = task;
        self.state = state;
        self.success = self.success_predicate();
        self.done = self.success || self.state.step_count >= self.cfg.t_max;
    }

    fn success_predicate(&self) -> bool {
        !self.state.gripper_closed && self.state.object_target_distance() <= self.cfg.target_radius
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::illegal("step after episode is done"));
        }
        let a = action
            .as_continuous()
            .ok_or_else(|| Error::invalid("table_sim takes continuous actions"))?;
        if a.len() != self.bounds.dim() {
            return Err(Error::invalid(format!("expected 3 action dims, got {}", a.len())));
        }
        let mut a = a.to_vec();
        self.bounds.clamp_in_place(&mut a);
        let s = &mut self.state;
        if a[2] > 0.0 {
            if !s.gripper_closed {
                s.gripper_closed = true;
                if dist(s.effector, s.object) <= self.cfg.grasp_radius {
                    s.object = s.effector;
                }
            }
        } else {
            s.gripper_closed = false;
        }
        let held = s.gripper_closed && s.object == s.effector;
        s.effector = clamp01([s.effector[0] + a[0], s.effector[1] + a[1]]);
        if held {
            s.object = s.effector;
        }
        s.attached = s.gripper_closed && s.object == s.effector;
        s.step_count += 1;
        self.success = self.success_predicate();
        self.done = self.success || self.state.step_count >= self.cfg.t_max;
        Ok(StepOutcome { observation: self.observe(), done: self.done, success: self.success })
    }

    pub fn observe(&self) -> Observation {
        encode(&self.state)
    }

    pub fn restore(&mut self, task: &Task, obs: &Observation) -> Result<()> {
        let mut state = decode(obs)?;
        state.target = self.target_for(task)?;
        self.set_state(task.clone(), state);
        Ok(())
    }
}

pub fn encode(s: &TableSimState) -> Observation {
    Observation(vec![
        s.effector[0],
        s.effector[1],
        if s.gripper_closed { 1.0 } else { 0.0 },
        s.object[0],
        s.object[1],
        s.target[0],
        s.target[1],
    ])
}

/// Inverse of [`encode`]; `step_count` is reset to zero.
pub fn decode(obs: &Observation) -> Result<TableSimState> {
    let f = obs.features();
    if f.len() != TABLE_OBS_DIM {
        return Err(Error::invalid(format!("table_sim observation has {} features", f.len())));
    }
    let in_unit = |v: f32| (0.0..=1.0).contains(&v);
    if ![f[0], f[1], f[3], f[4], f[5], f[6]].iter().all(|v| in_unit(*v)) {
        return Err(Error::invalid("table_sim positions must lie in [0,1]"));
    }
    let closed = match f[2] {
        0.0 => false,
        1.0 => true,
        g => return Err(Error::invalid(format!("gripper flag {g} is not 0/1"))),
    };
    let effector = [f[0], f[1]];
    let object = [f[3], f[4]];
    Ok(TableSimState {
        effector,
        gripper_closed: closed,
        object,
        attached: closed && object == effector,
        target: [f[5], f[6]],
        step_count: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, EnvConfig};

    fn sim() -> TableSim {
        TableSim::new(EnvConfig::table_sim()).unwrap()
    }

    fn state(eff: [f32; 2], obj: [f32; 2], closed: bool) -> TableSimState {
        TableSimState {
            effector: eff,
            gripper_closed: closed,
            object: obj,
            attached: closed && eff == obj,
            target: [0.2, 0.5],
            step_count: 0,
        }
    }

    fn act(dx: f32, dy: f32, g: f32) -> Action {
        Action::Continuous(vec![dx, dy, g])
    }

    #[test]
    fn step_moves_effector() {
        let mut e = sim();
        let t = e.tasks()[0].clone();
        e.set_state(t, state([0.5, 0.5], [0.9, 0.9], false));
        let out = e.step(&act(0.02, 0.0, -1.0)).unwrap();
        assert!((out.observation.0[0] - 0.52).abs() < 1e-6);
        assert_eq!(out.observation.0[1], 0.5);
        assert_eq!(out.observation.0[2], 0.0);
    }

    #[test]
    fn step_clamps_at_boundary() {
        let mut e = sim();
        let t = e.tasks()[0].clone();
        e.set_state(t, state([0.99, 0.5], [0.1, 0.1], false));
        let out = e.step(&act(0.05, 0.0, -1.0)).unwrap();
        assert_eq!(out.observation.0[0], 1.0);
        assert_eq!(out.observation.0[1], 0.5);
    }

    #[test]
    fn scripted_pick_and_place_succeeds() {
        let mut e = sim();
        let t = e.tasks()[0].clone();
        e.set_state(t, state([0.52, 0.5], [0.5, 0.5], false));
        let out = e.step(&act(0.0, 0.0, 1.0)).unwrap();
        assert!(e.state().attached);
        assert!(!out.done);
        for _ in 0..6 {
            let out = e.step(&act(-0.05, 0.0, 1.0)).unwrap();
            assert_eq!(e.state().effector_object_distance(), 0.0);
            assert!(!out.success);
        }
        assert!(e.state().object_target_distance() <= 0.07);
        let out = e.step(&act(0.0, 0.0, -1.0)).unwrap();
        assert!(out.success && out.done);
        assert!(matches!(e.step(&act(0.0, 0.0, 0.0)), Err(Error::IllegalState(_))));
    }

    #[test]
    fn closing_far_from_object_does_not_attach() {
        let mut e = sim();
        let t = e.tasks()[0].clone();
        e.set_state(t, state([0.5, 0.5], [0.6, 0.5], false));
        e.step(&act(0.05, 0.0, 1.0)).unwrap();
        assert!(e.state().gripper_closed && !e.state().attached);
        assert_eq!(e.state().object, [0.6, 0.5]);
    }

    #[test]
    fn episode_times_out() {
        let mut cfg = EnvConfig::table_sim();
        cfg.t_max = 3;
        let mut e = TableSim::new(cfg).unwrap();
        let t = e.tasks()[1].clone();
        e.reset(&t, &mut RngStream::new(1)).unwrap();
        for i in 0..3 {
            let out = e.step(&act(0.0, 0.0, 0.0)).unwrap();
            assert_eq!(out.done, i == 2);
            assert!(!out.success);
        }
    }

    #[test]
    fn reset_is_deterministic_and_separated() {
        let mut e = sim();
        let left = e.tasks()[0].clone();
        let a = e.reset(&left, &mut RngStream::new(3).fork("reset")).unwrap();
        let b = e.reset(&left, &mut RngStream::new(3).fork("reset")).unwrap();
        assert_eq!(a, b);
        let mut rng = RngStream::new(4);
        for _ in 0..1000 {
            e.reset(&left, &mut rng).unwrap();
            assert!(e.state().object_target_distance() > 0.07);
            assert!(!e.is_done());
        }
    }

    #[test]
    fn reset_rejects_foreign_task() {
        let mut e = sim();
        let bogus = Task::new(0, "goto-target-0", "grid_nav");
        assert!(matches!(e.reset(&bogus, &mut RngStream::new(1)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = RngStream::new(8);
        for _ in 0..200 {
            let eff = [rng.uniform() as f32, rng.uniform() as f32];
            let closed = rng.bernoulli(0.5);
            let obj = if rng.bernoulli(0.3) { eff } else { [rng.uniform() as f32, rng.uniform() as f32] };
            let s = TableSimState {
                effector: eff,
                gripper_closed: closed,
                object: obj,
                attached: closed && obj == eff,
                target: [0.8, 0.5],
                step_count: 0,
            };
            assert_eq!(decode(&encode(&s)).unwrap(), s);
        }
        assert_eq!(encode(&state([0.1, 0.2], [0.3, 0.4], false)).0[2], 0.0);
        assert!(decode(&Observation(vec![0.0; 6])).is_err());
        assert!(decode(&Observation(vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5])).is_err());
    }

    #[test]
    fn grasp_trigger_gate_and_rate() {
        let far = state([0.5, 0.5], [0.6, 0.5], false);
        let near = state([0.5, 0.5], [0.51, 0.5], false);
        let mut rng = RngStream::new(2);
        assert!((0..1000).all(|_| !grasp_trigger(&far, 0.05, 1.0, &mut rng)));
        assert!(grasp_trigger(&near, 0.05, 1.0, &mut rng));
        let closed = state([0.5, 0.5], [0.51, 0.5], true);
        assert!(!grasp_trigger(&closed, 0.05, 1.0, &mut rng));
        let hits = (0..10_000).filter(|_| grasp_trigger(&near, 0.05, 0.5, &mut rng)).count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.03, "{rate}");
    }

    #[test]
    fn env_wrapper_dispatch() {
        let mut env = Env::new(&EnvConfig::table_sim()).unwrap();
        assert_eq!(env.obs_dim(), 7);
        assert_eq!(env.tasks().len(), 2);
        let t = env.task(1).unwrap();
        let o = env.reset(&t, &mut RngStream::new(0)).unwrap();
        assert_eq!(&o.0[5..], &[0.8, 0.5]);
    }
}
