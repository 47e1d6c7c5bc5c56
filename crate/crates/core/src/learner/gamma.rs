use serde::{Deserialize, Serialize};

use super::LearnerError;

/// Discount factors optimized in parallel, plus the one used for rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSet {
    gammas: Vec<f64>,
    selected: usize,
}

impl GammaSet {
    pub fn new(gammas: Vec<f64>, selected: usize) -> Result<Self, LearnerError> {
        if gammas.is_empty() {
            return Err(LearnerError::Config("gamma set is empty".into()));
        }
        if gammas.iter().any(|&g| !(0.0..1.0).contains(&g)) {
            return Err(LearnerError::Config(
                "every gamma must lie in [0, 1)".into(),
            ));
        }
        if gammas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LearnerError::Config(
                "gammas must be strictly increasing".into(),
            ));
        }
        if selected >= gammas.len() {
            return Err(LearnerError::Config(format!(
                "gamma index {selected} out of {}",
                gammas.len()
            )));
        }
        Ok(Self { gammas, selected })
    }

    /// `{.9, .95, .99, .993, .996, .999}` with `.999` selected.
    pub fn default_list() -> Self {
        Self::new(vec![0.9, 0.95, 0.99, 0.993, 0.996, 0.999], 5).expect("valid default")
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    pub fn selected(&self) -> usize {
        self.selected
    }

    pub fn with_selected(&self, selected: usize) -> Result<Self, LearnerError> {
        Self::new(self.gammas.clone(), selected)
    }

    /// Index of an exact gamma value, if present.
    pub fn index_of(&self, gamma: f64) -> Option<usize> {
        self.gammas.iter().position(|&g| g == gamma)
    }
}
