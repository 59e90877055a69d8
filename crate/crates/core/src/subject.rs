use serde::{Deserialize, Serialize};

/// Diagnostic group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    CN,
    MCI,
    AD,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::CN, Group::MCI, Group::AD];

    /// Binary training label: controls versus the pooled MCI/AD group.
    pub fn label(self) -> usize {
        match self {
            Group::CN => 0,
            Group::MCI | Group::AD => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::CN => "CN",
            Group::MCI => "MCI",
            Group::AD => "AD",
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    pub fn code(self) -> f64 {
        match self {
            Sex::F => 0.0,
            Sex::M => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldStrength {
    #[serde(rename = "1.5T")]
    T1_5,
    #[serde(rename = "3T")]
    T3,
}

impl FieldStrength {
    pub fn code(self) -> f64 {
        match self {
            FieldStrength::T1_5 => 0.0,
            FieldStrength::T3 => 1.0,
        }
    }

    pub fn tesla(self) -> f64 {
        match self {
            FieldStrength::T1_5 => 1.5,
            FieldStrength::T3 => 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Amyloid {
    Neg,
    Pos,
}

/// One participant: diagnosis, covariates and (for phantoms) the simulated
/// atrophy severity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub group: Group,
    pub age: f64,
    pub sex: Sex,
    /// Total intracranial volume in ml.
    pub tiv: f64,
    pub field_strength: FieldStrength,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amyloid: Option<Amyloid>,
    #[serde(default)]
    pub lesion_severity: f64,
}

impl SubjectRecord {
    pub fn label(&self) -> usize {
        self.group.label()
    }

    /// Covariate row in the order age, sex, tiv, field strength, with sex
    /// and field strength coded 0/1.
    pub fn covariates(&self) -> [f64; 4] {
        [
            self.age,
            self.sex.code(),
            self.tiv,
            self.field_strength.code(),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.age > 0.0) {
            return Err(format!("{}: age must be positive", self.id));
        }
        if !(self.tiv > 0.0) {
            return Err(format!("{}: tiv must be positive", self.id));
        }
        if !(0.0..=1.0).contains(&self.lesion_severity) {
            return Err(format!("{}: lesion severity outside [0, 1]", self.id));
        }
        if self.group == Group::CN && self.lesion_severity != 0.0 {
            return Err(format!(
                "{}: controls must have zero lesion severity",
                self.id
            ));
        }
        Ok(())
    }
}
