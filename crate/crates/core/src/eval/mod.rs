//! Noise-normalized scoring, bootstrap uncertainty and report output.

mod report;
mod score;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use report::{
    format_score, plot_path, read_results_csv, render_markdown, render_report, render_svg, write_results_csv, PlotData,
    ResultRow,
};
pub use score::{
    bootstrap_stderr, channel_means, ground_truth_forecast, noise_normalized_r2, r2_contributions, score_method,
    score_parts, ScoreParts, ScoreRecord,
};

/// The compared forecasting methods, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GroundTruth,
    Fit,
    Linear,
    Rbf,
    Triplet,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::GroundTruth,
        Method::Fit,
        Method::Linear,
        Method::Rbf,
        Method::Triplet,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::GroundTruth => "ground_truth",
            Method::Fit => "fit",
            Method::Linear => "linear",
            Method::Rbf => "rbf",
            Method::Triplet => "triplet",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::GroundTruth => "Ground truth",
            Method::Fit => "Mechanistic Model",
            Method::Linear => "Deep Sets + linear splines",
            Method::Rbf => "Deep Sets + RBF kernel reg.",
            Method::Triplet => "Deep Sets + triplet encoding",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == s)
    }

    /// Whether the method trains a Deep Set network.
    pub fn is_network(self) -> bool {
        matches!(self, Method::Linear | Method::Rbf | Method::Triplet)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}
