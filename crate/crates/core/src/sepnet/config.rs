use crate::error::{Error, Result};

/// Hyperparameters of one separation stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    /// Encoder filters `N`.
    pub num_filters: usize,
    /// Encoder kernel `L` in samples.
    pub kernel_len: usize,
    pub stride: usize,
    /// Chunk length `K` in frames.
    pub chunk_len: usize,
    pub chunk_hop: usize,
    pub num_blocks: usize,
    /// BiLSTM hidden size per direction.
    pub hidden_size: usize,
    pub num_speakers: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            num_filters: 64,
            kernel_len: 16,
            stride: 8,
            chunk_len: 50,
            chunk_hop: 25,
            num_blocks: 6,
            hidden_size: 64,
            num_speakers: 2,
        }
    }
}

impl StageConfig {
    /// Desk-scale defaults with the given width, chunk length and depth.
    pub fn sized(num_filters: usize, chunk_len: usize, hidden_size: usize, num_blocks: usize) -> Self {
        StageConfig {
            num_filters,
            chunk_len,
            chunk_hop: chunk_len / 2,
            hidden_size,
            num_blocks,
            ..Self::default()
        }
    }

    pub fn with_blocks(self, num_blocks: usize) -> Self {
        StageConfig { num_blocks, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_filters", self.num_filters),
            ("kernel_len", self.kernel_len),
            ("stride", self.stride),
            ("hidden_size", self.hidden_size),
            ("num_blocks", self.num_blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.kernel_len % self.stride != 0 {
            return Err(Error::Config(format!(
                "stride {} must divide kernel length {}",
                self.stride, self.kernel_len
            )));
        }
        if self.chunk_len < 2 || self.chunk_hop != self.chunk_len / 2 {
            return Err(Error::Config(format!(
                "chunk length {} must be at least 2 with hop {} equal to half of it",
                self.chunk_len, self.chunk_hop
            )));
        }
        if !(2..=4).contains(&self.num_speakers) {
            return Err(Error::Config(format!(
                "num_speakers must be between 2 and 4, got {}",
                self.num_speakers
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        StageConfig::default().validate().unwrap();
        assert_eq!(StageConfig::default().stride * 2, StageConfig::default().kernel_len);
    }

    #[test]
    fn rejects_bad_settings() {
        let base = StageConfig::default();
        assert!(StageConfig { stride: 5, ..base }.validate().is_err());
        assert!(StageConfig { chunk_hop: 10, ..base }.validate().is_err());
        assert!(base.with_blocks(0).validate().is_err());
        assert!(StageConfig { num_speakers: 1, ..base }.validate().is_err());
    }
}
