//! Hand-off to an external attribute-binding judge. Requests are written as
//! JSON lines; the judge answers with one 1–5 score per dimension.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JUDGE_DIMENSIONS: [&str; 3] = ["color", "shape", "texture"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub id: String,
    pub prompt: String,
    pub image: String,
    pub dimensions: Vec<String>,
    pub scale: (u8, u8),
}

impl JudgeRequest {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, image: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            image: image.into(),
            dimensions: JUDGE_DIMENSIONS.iter().map(|s| s.to_string()).collect(),
            scale: (1, 5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeScore {
    pub color: u8,
    pub shape: u8,
    pub texture: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreLine {
    id: String,
    #[serde(flatten)]
    score: JudgeScore,
}

pub fn write_judge_requests(path: impl AsRef<Path>, requests: &[JudgeRequest]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in requests {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads judge answers as `(id, score)` pairs in file order.
pub fn read_judge_scores(path: impl AsRef<Path>) -> Result<Vec<(String, JudgeScore)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: ScoreLine = serde_json::from_str(line)?;
        let s = parsed.score;
        if [s.color, s.shape, s.texture].iter().any(|v| !(1..=5).contains(v)) {
            return Err(Error::Config(format!("judge score for {} outside 1..=5", parsed.id)));
        }
        out.push((parsed.id, s));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_and_scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let req = dir.path().join("requests.jsonl");
        write_judge_requests(&req, &[JudgeRequest::new("a", "a red teapot", "a.png")]).unwrap();
        let line = std::fs::read_to_string(&req).unwrap();
        assert!(line.contains("\"dimensions\":[\"color\",\"shape\",\"texture\"]"));
        let scores = dir.path().join("scores.jsonl");
        std::fs::write(&scores, "{\"id\":\"a\",\"color\":4,\"shape\":3,\"texture\":5}\n").unwrap();
        assert_eq!(read_judge_scores(&scores).unwrap()[0].1.texture, 5);
        std::fs::write(&scores, "{\"id\":\"a\",\"color\":9,\"shape\":3,\"texture\":5}\n").unwrap();
        assert!(read_judge_scores(&scores).is_err());
    }
}
