//! Evaluation: metrics, probes, ablation runners.
