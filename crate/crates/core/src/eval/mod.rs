//! Similarity metrics over the cropped inpainted region.

mod embed;
mod judge;
mod report;

pub use embed::{cosine, Embedder, MockImageEmbedder, Modality, RecordingEmbedder};
pub use judge::{read_judge_scores, write_judge_requests, JudgeRequest, JudgeScore};
pub use report::{crop_metric_region, evaluate_run, EvalInputs, EvalProtocol, EvalRecord, Means, Task, TaskReport};
