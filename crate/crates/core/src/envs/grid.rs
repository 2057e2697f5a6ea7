use std::collections::VecDeque;

use super::{EnvConfig, StepOutcome};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{Action, Observation, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    Target(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn left(self) -> Heading {
        Self::ALL[(self.index() + 3) % 4]
    }

    pub fn right(self) -> Heading {
        Self::ALL[(self.index() + 1) % 4]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    MoveAhead = 0,
    TurnLeft = 1,
    TurnRight = 2,
    Done = 3,
}

impl GridAction {
    pub const COUNT: usize = 4;

    pub fn from_index(i: u8) -> Option<GridAction> {
        match i {
            0 => Some(GridAction::MoveAhead),
            1 => Some(GridAction::TurnLeft),
            2 => Some(GridAction::TurnRight),
            3 => Some(GridAction::Done),
            _ => None,
        }
    }

    pub fn action(self) -> Action {
        Action::Discrete(self as u8)
    }
}

/// Square occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    size: usize,
    cells: Vec<Cell>,
    n_targets: usize,
}

impl GridLayout {
    /// Parse an ASCII map: '#' wall, '.' free, digits are target ids.
    pub fn parse(map: &str) -> Result<Self> {
        let rows: Vec<&str> = map.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let size = rows.len();
        if size < 3 || rows.iter().any(|r| r.chars().count() != size) {
            return Err(Error::invalid("grid map must be square with side >= 3"));
        }
        let mut cells = Vec::with_capacity(size * size);
        for r in &rows {
            for ch in r.chars() {
                cells.push(match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Free,
                    d if d.is_ascii_digit() => Cell::Target(d as u8 - b'0'),
                    c => return Err(Error::invalid(format!("unexpected map character {c:?}"))),
                });
            }
        }
        let mut ids: Vec<u8> = cells
            .iter()
            .filter_map(|c| if let Cell::Target(k) = c { Some(*k) } else { None })
            .collect();
        ids.sort_unstable();
        let n_targets = ids.len();
        if n_targets == 0 || ids.iter().enumerate().any(|(i, k)| *k as usize != i) {
            return Err(Error::invalid("targets must be the digits 0..n, each used once"));
        }
        let layout = GridLayout { size, cells, n_targets };
        layout.check_solvable()?;
        Ok(layout)
    }

    /// Random interior walls and targets inside a walled border.
    pub fn generate(size: usize, n_targets: usize, seed: u64) -> Result<Self> {
        let base = RngStream::new(seed).fork("grid-layout");
        for attempt in 0..1000 {
            let mut rng = base.fork_indexed("attempt", attempt);
            let mut cells = vec![Cell::Free; size * size];
            for r in 0..size {
                for c in 0..size {
                    let border = r == 0 || c == 0 || r == size - 1 || c == size - 1;
                    if border || rng.bernoulli(0.15) {
                        cells[r * size + c] = Cell::Wall;
                    }
                }
            }
            let mut placed = 0;
            while placed < n_targets {
                let i = rng.below(size * size);
                if cells[i] == Cell::Free {
                    cells[i] = Cell::Target(placed as u8);
                    placed += 1;
                }
            }
            let layout = GridLayout { size, cells, n_targets };
            if layout.check_solvable().is_ok() && layout.free_cells().len() >= 10 {
                return Ok(layout);
            }
        }
        Err(Error::PlanningFailure("could not generate a connected layout".into()))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn cell(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.size + c]
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for r in 0..self.size {
            for c in 0..self.size {
                s.push(match self.cell(r, c) {
                    Cell::Free => '.',
                    Cell::Wall => '#',
                    Cell::Target(k) => (b'0' + k) as char,
                });
            }
            s.push('\n');
        }
        s
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.size * self.size)
            .filter(|i| self.cells[*i] == Cell::Free)
            .map(|i| (i / self.size, i % self.size))
            .collect()
    }

    fn neighbor(&self, (r, c): (usize, usize), h: Heading) -> Option<(usize, usize)> {
        let (dr, dc) = h.delta();
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= self.size as isize || nc >= self.size as isize {
            return None;
        }
        Some((nr as usize, nc as usize))
    }

    /// Free cells connected; every target reachable from a free neighbor.
    fn check_solvable(&self) -> Result<()> {
        let free = self.free_cells();
        let Some(&start) = free.first() else {
            return Err(Error::PlanningFailure("layout has no free cells".into()));
        };
        let mut seen = vec![false; self.size * self.size];
        let mut queue = VecDeque::from([start]);
        seen[start.0 * self.size + start.1] = true;
        let mut count = 1;
        while let Some(p) = queue.pop_front() {
            for h in Heading::ALL {
                if let Some(n) = self.neighbor(p, h) {
                    let i = n.0 * self.size + n.1;
                    if !seen[i] && self.cells[i] == Cell::Free {
                        seen[i] = true;
                        count += 1;
                        queue.push_back(n);
                    }
                }
            }
        }
        if count != free.len() {
            return Err(Error::PlanningFailure("free cells are not connected".into()));
        }
        for r in 0..self.size {
            for c in 0..self.size {
                if let Cell::Target(k) = self.cell(r, c) {
                    let reachable = Heading::ALL.iter().any(|h| {
                        self.neighbor((r, c), *h).is_some_and(|n| self.cell(n.0, n.1) == Cell::Free)
                    });
                    if !reachable {
                        return Err(Error::PlanningFailure(format!("target {k} is enclosed")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridNavState {
    pub agent: (usize, usize),
    pub heading: Heading,
    pub target_id: u8,
    pub step_count: usize,
}

#[derive(Debug, Clone)]
pub struct GridNav {
    cfg: EnvConfig,
    layout: GridLayout,
    state: GridNavState,
    done: bool,
    success: bool,
}

impl GridNav {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        let layout = match &cfg.grid_map {
            Some(map) => GridLayout::parse(map)?,
            None => GridLayout::generate(cfg.grid_size, cfg.n_targets, cfg.layout_seed)?,
        };
        let agent = layout.free_cells()[0];
        Ok(GridNav {
            cfg,
            layout,
            state: GridNavState { agent, heading: Heading::North, target_id: 0, step_count: 0 },
            done: false,
            success: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn state(&self) -> &GridNavState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    pub fn tasks(&self) -> Vec<Task> {
        (0..self.layout.n_targets)
            .map(|k| Task::new(k as u32, format!("goto-target-{k}"), "grid_nav"))
            .collect()
    }

    fn check_task(&self, task: &Task) -> Result<u8> {
        if task.env_name != "grid_nav" || task.id as usize >= self.layout.n_targets {
            return Err(Error::invalid(format!("task {:?} does not belong to this grid", task.description)));
        }
        Ok(task.id as u8)
    }

    pub fn obs_dim(&self) -> usize {
        if self.cfg.raster {
            25
        } else {
            self.layout.size * self.layout.size + 4 + self.layout.n_targets
        }
    }

    pub fn reset(&mut self, task: &Task, rng: &mut RngStream) -> Result<Observation> {
        let target_id = self.check_task(task)?;
        let free = self.layout.free_cells();
        let agent = free[rng.below(free.len())];
        let heading = Heading::ALL[rng.below(4)];
        self.set_state(GridNavState { agent, heading, target_id, step_count: 0 })?;
        Ok(self.observe())
    }

    pub fn set_state(&mut self, state: GridNavState) -> Result<()> {
        if self.layout.cell(state.agent.0, state.agent.1) != Cell::Free {
            return Err(Error::invalid("agent must stand on a free cell"));
        }
        self.state = state;
        self.success = false;
        self.done = self.state.step_count >= self.cfg.t_max;
        Ok(())
    }

    pub fn front_cell(&self) -> Option<Cell> {
        self.layout
            .neighbor(self.state.agent, self.state.heading)
            .map(|(r, c)| self.layout.cell(r, c))
    }

    /// Agent is adjacent to, and facing, its target.
    pub fn facing_target(&self) -> bool {
        self.front_cell() == Some(Cell::Target(self.state.target_id))
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::illegal("step after episode is done"));
        }
        let idx = action.as_discrete().ok_or_else(|| Error::invalid("grid_nav takes discrete actions"))?;
        match GridAction::from_index(idx) {
            Some(GridAction::MoveAhead) => {
                if let Some(n) = self.layout.neighbor(self.state.agent, self.state.heading) {
                    if self.layout.cell(n.0, n.1) == Cell::Free {
                        self.state.agent = n;
                    }
                }
            }
            Some(GridAction::TurnLeft) => self.state.heading = self.state.heading.left(),
            Some(GridAction::TurnRight) => self.state.heading = self.state.heading.right(),
            Some(GridAction::Done) => {
                self.success = self.facing_target();
                self.done = true;
            }
            None if idx == Action::DISCRETE_NOOP => {}
            None => return Err(Error::invalid(format!("action index {idx} out of range"))),
        }
        self.state.step_count += 1;
        if self.state.step_count >= self.cfg.t_max {
            self.done = true;
        }
        Ok(StepOutcome { observation: self.observe(), done: self.done, success: self.success })
    }

    pub fn observe(&self) -> Observation {
        if self.cfg.raster {
            return Observation(self.raster(&self.state));
        }
        let n = self.layout.size;
        let mut f = vec![0.0; self.obs_dim()];
        f[self.state.agent.0 * n + self.state.agent.1] = 1.0;
        f[n * n + self.state.heading.index()] = 1.0;
        f[n * n + 4 + self.state.target_id as usize] = 1.0;
        Observation(f)
    }

    /// 5x5 view centered on the agent, rotated so the heading points up.
    /// Walls and off-grid cells are 1, free cells 0, the task target 0.5 and
    /// other targets 0.25.
    fn raster(&self, s: &GridNavState) -> Vec<f32> {
        let mut out = Vec::with_capacity(25);
        for row in -2isize..=2 {
            for col in -2isize..=2 {
                // row < 0 is ahead of the agent, col > 0 to its right.
                let (dr, dc) = match s.heading {
                    Heading::North => (row, col),
                    Heading::East => (col, -row),
                    Heading::South => (-row, -col),
                    Heading::West => (-col, row),
                };
                let r = s.agent.0 as isize + dr;
                let c = s.agent.1 as isize + dc;
                let n = self.layout.size as isize;
                let v = if r < 0 || c < 0 || r >= n || c >= n {
                    1.0
                } else {
                    match self.layout.cell(r as usize, c as usize) {
                        Cell::Wall => 1.0,
                        Cell::Free => 0.0,
                        Cell::Target(k) if k == s.target_id => 0.5,
                        Cell::Target(_) => 0.25,
                    }
                };
                out.push(v);
            }
        }
        out
    }

    fn decode(&self, task_target: u8, obs: &Observation) -> Result<GridNavState> {
        let f = obs.features();
        if f.len() != self.obs_dim() {
            return Err(Error::invalid(format!("grid observation has {} features", f.len())));
        }
        if self.cfg.raster {
            // Not injective in general; accept only unambiguous views.
            let mut found = None;
            for agent in self.layout.free_cells() {
                for heading in Heading::ALL {
                    let s = GridNavState { agent, heading, target_id: task_target, step_count: 0 };
                    if self.raster(&s) == f {
                        if found.is_some() {
                            return Err(Error::invalid("raster view is ambiguous"));
                        }
                        found = Some(s);
                    }
                }
            }
            return found.ok_or_else(|| Error::invalid("raster view matches no state"));
        }
        let n = self.layout.size;
        let one_hot = |s: &[f32]| -> Result<usize> {
            let ones: Vec<usize> = s.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
            if ones.len() != 1 || s.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::invalid("grid observation is not one-hot"));
            }
            Ok(ones[0])
        };
        let cell = one_hot(&f[..n * n])?;
        let heading = Heading::ALL[one_hot(&f[n * n..n * n + 4])?];
        one_hot(&f[n * n + 4..])?;
        let agent = (cell / n, cell % n);
        if self.layout.cell(agent.0, agent.1) != Cell::Free {
            return Err(Error::invalid("decoded agent cell is not free"));
        }
        Ok(GridNavState { agent, heading, target_id: task_target, step_count: 0 })
    }

    pub fn restore(&mut self, task: &Task, obs: &Observation) -> Result<()> {
        let target = self.check_task(task)?;
        let state = self.decode(target, obs)?;
        self.set_state(state)
    }

    /// 0 when cell and heading agree, 1 otherwise (raster: L-infinity over
    /// the view).
    pub fn position_distance(&self, a: &Observation, b: &Observation) -> f32 {
        let len = if self.cfg.raster {
            25
        } else {
            self.layout.size * self.layout.size + 4
        };
        a.0[..len].iter().zip(&b.0[..len]).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    /// Shortest action sequence ending with `Done` while facing the target.
    pub fn plan_to_target(&self) -> Result<Vec<GridAction>> {
        let n = self.layout.size;
        let key = |p: (usize, usize), h: Heading| (p.0 * n + p.1) * 4 + h.index();
        let mut prev: Vec<Option<(usize, GridAction)>> = vec![None; n * n * 4];
        let mut seen = vec![false; n * n * 4];
        let start = (self.state.agent, self.state.heading);
        seen[key(start.0, start.1)] = true;
        let mut queue = VecDeque::from([start]);
        let target = Cell::Target(self.state.target_id);
        while let Some((p, h)) = queue.pop_front() {
            let facing = self.layout.neighbor(p, h).map(|q| self.layout.cell(q.0, q.1)) == Some(target);
            if facing {
                let mut plan = vec![GridAction::Done];
                let mut k = key(p, h);
                while let Some((pk, a)) = prev[k] {
                    plan.push(a);
                    k = pk;
                }
                plan.reverse();
                return Ok(plan);
            }
            let mut succ = vec![(p, h.left(), GridAction::TurnLeft), (p, h.right(), GridAction::TurnRight)];
            if let Some(q) = self.layout.neighbor(p, h) {
                if self.layout.cell(q.0, q.1) == Cell::Free {
                    succ.push((q, h, GridAction::MoveAhead));
                }
            }
            for (q, hq, a) in succ {
                let k = key(q, hq);
                if !seen[k] {
                    seen[k] = true;
                    prev[k] = Some((key(p, h), a));
                    queue.push_back((q, hq));
                }
            }
        }
        Err(Error::PlanningFailure(format!("target {} unreachable", self.state.target_id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvConfig;

    const MAP: &str = "
        #####
        #..0#
        #...#
        #..1#
        #####";

    fn env(map: &str) -> GridNav {
        let mut cfg = EnvConfig::grid_nav();
        cfg.grid_map = Some(map.to_string());
        GridNav::new(cfg).unwrap()
    }

    #[test]
    fn parse_and_print() {
        let g = env(MAP);
        assert_eq!(g.layout().size(), 5);
        assert_eq!(g.layout().n_targets(), 2);
        assert_eq!(g.layout().cell(1, 3), Cell::Target(0));
        assert_eq!(GridLayout::parse(&g.layout().to_ascii()).unwrap(), *g.layout());
        assert!(GridLayout::parse("###\n#x#\n###").is_err());
        assert!(GridLayout::parse("###\n#.#\n###").is_err());
    }

    #[test]
    fn default_layout_dims() {
        let g = GridNav::new(EnvConfig::grid_nav()).unwrap();
        assert_eq!(g.layout().size(), 9);
        assert_eq!(g.obs_dim(), 81 + 4 + 3);
    }

    #[test]
    fn move_turn_and_blocking() {
        let mut g = env(MAP);
        g.set_state(GridNavState { agent: (1, 1), heading: Heading::North, target_id: 0, step_count: 0 })
            .unwrap();
        let o = g.step(&GridAction::MoveAhead.action()).unwrap();
        assert_eq!(g.state().agent, (1, 1), "wall blocks");
        assert!(!o.done);
        g.step(&GridAction::TurnRight.action()).unwrap();
        assert_eq!(g.state().heading, Heading::East);
        g.step(&GridAction::MoveAhead.action()).unwrap();
        assert_eq!(g.state().agent, (1, 2));
        // The target cell is not walkable.
        g.step(&GridAction::MoveAhead.action()).unwrap();
        assert_eq!(g.state().agent, (1, 2));
        let o = g.step(&GridAction::Done.action()).unwrap();
        assert!(o.success && o.done);
    }

    #[test]
    fn done_elsewhere_fails() {
        let mut g = env(MAP);
        g.set_state(GridNavState { agent: (1, 1), heading: Heading::South, target_id: 0, step_count: 0 })
            .unwrap();
        let o = g.step(&GridAction::Done.action()).unwrap();
        assert!(o.done && !o.success);
        assert!(matches!(g.step(&GridAction::Done.action()), Err(Error::IllegalState(_))));
    }

    #[test]
    fn reset_never_lands_on_walls() {
        let mut g = GridNav::new(EnvConfig::grid_nav()).unwrap();
        let tasks = g.tasks();
        let mut rng = RngStream::new(0);
        for i in 0..10_000 {
            g.reset(&tasks[i % tasks.len()], &mut rng).unwrap();
            let (r, c) = g.state().agent;
            assert_eq!(g.layout().cell(r, c), Cell::Free);
        }
    }

    #[test]
    fn observe_roundtrip_one_hot() {
        let mut g = GridNav::new(EnvConfig::grid_nav()).unwrap();
        let tasks = g.tasks();
        let mut rng = RngStream::new(1);
        for t in &tasks {
            let o = g.reset(t, &mut rng).unwrap();
            let s = g.state().clone();
            let mut h = g.clone();
            h.restore(t, &o).unwrap();
            assert_eq!(*h.state(), s);
        }
    }

    #[test]
    fn raster_mode_shape_and_decode() {
        let mut cfg = EnvConfig::grid_nav();
        cfg.raster = true;
        let mut g = GridNav::new(cfg).unwrap();
        let t = g.tasks()[0].clone();
        let o = g.reset(&t, &mut RngStream::new(2)).unwrap();
        assert_eq!(o.len(), 25);
        // Center cell is where the agent stands.
        assert_eq!(o.0[12], 0.0);
        let s = g.state().clone();
        let mut h = g.clone();
        match h.restore(&t, &o) {
            Ok(()) => assert_eq!(*h.state(), s),
            Err(e) => assert!(matches!(e, Error::InvalidArgument(_))),
        }
    }

    #[test]
    fn bfs_plan_reaches_target() {
        let mut g = GridNav::new(EnvConfig::grid_nav()).unwrap();
        let tasks = g.tasks();
        let mut rng = RngStream::new(3);
        for i in 0..200 {
            g.reset(&tasks[i % tasks.len()], &mut rng).unwrap();
            let plan = g.plan_to_target().unwrap();
            let mut last = None;
            for a in plan {
                last = Some(g.step(&a.action()).unwrap());
            }
            assert!(last.unwrap().success);
        }
    }
}
