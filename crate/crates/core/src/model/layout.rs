use serde::Serialize;

/// How an unconstrained coordinate maps to its natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Coordinate is the log of a positive parameter.
    Log,
}

/// A contiguous run of parameters sharing a name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
    pub labels: Vec<String>,
}

/// Named blocks of the unconstrained parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    dim: usize,
}

impl ParamLayout {
    /// Appends entries to the block called `name`, creating it if needed.
    /// Returns the offset of the first new entry.
    pub(crate) fn push(&mut self, name: &str, transform: Transform, labels: Vec<String>) -> usize {
        let offset = self.dim;
        self.dim += labels.len();
        match self.blocks.last_mut() {
            Some(b) if b.name == name => {
                b.len += labels.len();
                b.labels.extend(labels);
            }
            _ => self.blocks.push(ParamBlock {
                name: name.to_string(),
                offset,
                len: labels.len(),
                transform,
                labels,
            }),
        }
        offset
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Total length of all blocks called `name`.
    pub fn block_len(&self, name: &str) -> usize {
        self.blocks.iter().filter(|b| b.name == name).map(|b| b.len).sum()
    }

    /// Flat coordinate names, `name[label]`.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            for l in &b.labels {
                if l.is_empty() {
                    out.push(b.name.clone());
                } else {
                    out.push(format!("{}[{l}]", b.name));
                }
            }
        }
        out
    }

    /// Block name owning coordinate `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| i >= b.offset && i < b.offset + b.len)
            .map_or("?", |b| b.name.as_str())
    }

    pub(crate) fn first_nonfinite(&self, theta: &[f64]) -> Option<&str> {
        theta.iter().position(|v| !v.is_finite()).map(|i| self.name_of(i))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }
}
