use std::io::{Cursor, Read};

use serde::{Deserialize, Serialize};

use super::{Goal, Instruction, ReplayError};
use crate::trajencoder::TimestepRecord;

pub const MAGIC: &[u8; 4] = b"AMTJ";
pub const FORMAT_VERSION: u32 = 1;
/// Stored action of the first row, which has no previous action.
pub const NO_ACTION: u32 = u32::MAX;

/// One stored row: the observation after the previous action, what led there, and what it achieved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Vec<f32>,
    pub prev_action: Option<u32>,
    pub prev_reward: f32,
    pub reset: bool,
    pub time: f32,
    pub achieved: Vec<Goal>,
}

/// Shape metadata shared by every trajectory of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryShape {
    pub obs_dim: usize,
    pub action_count: usize,
    pub goal_len: usize,
    pub max_goals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub shape: TrajectoryShape,
    pub env_seed: u64,
    pub id: u64,
    pub instruction: Instruction,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn achieved_log(&self) -> Vec<Vec<Goal>> {
        self.steps.iter().map(|s| s.achieved.clone()).collect()
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.prev_reward as f64).sum()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: String| Err(ReplayError::Invalid(m));
        let s = &self.shape;
        if self.steps.is_empty() {
            return bad("trajectory has no steps".into());
        }
        if self.instruction.len() > s.max_goals {
            return bad(format!(
                "instruction has {} goals, limit {}",
                self.instruction.len(),
                s.max_goals
            ));
        }
        if self
            .instruction
            .goals()
            .iter()
            .any(|g| g.0.len() != s.goal_len)
        {
            return bad("instruction goal has wrong tuple length".into());
        }
        for (t, st) in self.steps.iter().enumerate() {
            if st.observation.len() != s.obs_dim {
                return bad(format!(
                    "step {t}: observation length {}",
                    st.observation.len()
                ));
            }
            match (t, st.prev_action) {
                (0, Some(_)) => return bad("first step has a previous action".into()),
                (0, None) => {}
                (_, None) => return bad(format!("step {t}: missing previous action")),
                (_, Some(a)) if a as usize >= s.action_count => {
                    return bad(format!("step {t}: action {a}"))
                }
                _ => {}
            }
            if t == 0 && !st.achieved.is_empty() {
                return bad("first step cannot achieve goals".into());
            }
            if st.achieved.iter().any(|g| g.0.len() != s.goal_len) {
                return bad(format!("step {t}: achieved goal has wrong tuple length"));
            }
            if !(0.0..=1.0).contains(&st.time) {
                return bad(format!("step {t}: time feature {}", st.time));
            }
        }
        Ok(())
    }

    /// Encoder input frames with this trajectory's instruction on every row.
    pub fn records(&self) -> Vec<TimestepRecord> {
        let tokens = self
            .instruction
            .padded_tokens(self.shape.max_goals, self.shape.goal_len);
        self.steps
            .iter()
            .map(|s| TimestepRecord {
                observation: s.observation.iter().map(|&x| x as f64).collect(),
                prev_action: s.prev_action.map(|a| a as usize),
                prev_reward: s.prev_reward as f64,
                reset_flag: s.reset,
                time_feature: s.time as f64,
                instruction_tokens: tokens.clone(),
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>, ReplayError> {
        self.validate()?;
        let s = &self.shape;
        let mut out = Vec::new();
        let u32s = |out: &mut Vec<u8>, x: usize| -> Result<(), ReplayError> {
            let v = u32::try_from(x)
                .map_err(|_| ReplayError::Invalid(format!("{x} does not fit in u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
            Ok(())
        };
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        u32s(&mut out, s.obs_dim)?;
        u32s(&mut out, s.action_count)?;
        u32s(&mut out, s.goal_len)?;
        u32s(&mut out, s.max_goals)?;
        u32s(&mut out, self.steps.len())?;
        out.extend_from_slice(&self.env_seed.to_le_bytes());
        u32s(&mut out, self.instruction.len())?;
        for g in self.instruction.goals() {
            g.0.iter()
                .for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
        }
        for st in &self.steps {
            st.observation
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            out.extend_from_slice(&st.prev_action.unwrap_or(NO_ACTION).to_le_bytes());
            out.extend_from_slice(&st.prev_reward.to_le_bytes());
            out.push(st.reset as u8);
            out.extend_from_slice(&st.time.to_le_bytes());
            u32s(&mut out, st.achieved.len())?;
            for g in &st.achieved {
                g.0.iter()
                    .for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], id: u64) -> Result<Self, ReplayError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt(0, "truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(corrupt(4, &format!("unsupported version {version}")));
        }
        let shape = TrajectoryShape {
            obs_dim: read_u32(&mut r)? as usize,
            action_count: read_u32(&mut r)? as usize,
            goal_len: read_u32(&mut r)? as usize,
            max_goals: read_u32(&mut r)? as usize,
        };
        let count = read_u32(&mut r)? as usize;
        let mut seed = [0u8; 8];
        let at = r.position();
        r.read_exact(&mut seed)
            .map_err(|_| corrupt(at, "truncated header"))?;
        let env_seed = u64::from_le_bytes(seed);
        let read_goal = |r: &mut Cursor<&[u8]>| -> Result<Goal, ReplayError> {
            (0..shape.goal_len)
                .map(|_| read_u32(r))
                .collect::<Result<_, _>>()
                .map(Goal)
        };
        let at = r.position();
        let goals = read_u32(&mut r)? as usize;
        if goals > shape.max_goals {
            return Err(corrupt(
                at,
                &format!("{goals} goals exceed limit {}", shape.max_goals),
            ));
        }
        let goals = (0..goals)
            .map(|_| read_goal(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let instruction = if goals.is_empty() {
            Instruction::empty()
        } else {
            Instruction::new(goals).map_err(|e| corrupt(at, &e.to_string()))?
        };
        let mut steps = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let observation = (0..shape.obs_dim)
                .map(|_| read_f32(&mut r))
                .collect::<Result<_, _>>()?;
            let action = read_u32(&mut r)?;
            let prev_reward = read_f32(&mut r)?;
            let mut flag = [0u8; 1];
            let at = r.position();
            r.read_exact(&mut flag)
                .map_err(|_| corrupt(at, "truncated step"))?;
            let time = read_f32(&mut r)?;
            let n = read_u32(&mut r)? as usize;
            let achieved = (0..n)
                .map(|_| read_goal(&mut r))
                .collect::<Result<_, _>>()?;
            steps.push(Step {
                observation,
                prev_action: (action != NO_ACTION).then_some(action),
                prev_reward,
                reset: flag[0] != 0,
                time,
                achieved,
            });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt(r.position(), "trailing bytes"));
        }
        let traj = Self {
            shape,
            env_seed,
            id,
            instruction,
            steps,
        };
        traj.validate()
            .map_err(|e| corrupt(bytes.len() as u64, &e.to_string()))?;
        Ok(traj)
    }
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32, ReplayError> {
    let mut b = [0u8; 4];
    let at = r.position();
    r.read_exact(&mut b)
        .map_err(|_| corrupt(at, "unexpected end of data"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut Cursor<&[u8]>) -> Result<f32, ReplayError> {
    read_u32(r).map(f32::from_bits)
}

fn corrupt(offset: u64, what: &str) -> ReplayError {
    ReplayError::Corrupt(format!("{what} at offset {offset}"))
}
