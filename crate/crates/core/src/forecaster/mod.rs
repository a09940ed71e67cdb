//! Deep Set forecaster over triplet-encoded (or grid-imputed) contexts,
//! conditioned on a query time.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{load_model, model_from_checkpoint, model_to_checkpoint, save_model};
pub use model::{encode_triplet, Architecture, DeepSetModel, EncodedBatch, Encoding};
pub use train::{
    batch_seed, evaluate_loss, loss_at_params, train_forecaster, train_model, HistoryEntry, TrainConfig, TrainOutcome,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{NormalizationStats, SparseSeries, TripletRecord};

    fn model(encoding: Encoding, seed: u64) -> DeepSetModel {
        let arch = Architecture {
            latent_dim: 6,
            extractor_hidden: vec![8],
            aggregator_hidden: vec![8],
        };
        let stats = NormalizationStats {
            mean: vec![1.0, 0.5],
            std: vec![0.5, 0.25],
            t_max: 4.0,
        };
        DeepSetModel::new(encoding, stats, vec!["A".into(), "P".into()], &arch, 5, 2.0, seed).unwrap()
    }

    fn ctx(pts: &[(f64, usize, f64)]) -> SparseSeries {
        SparseSeries::new(
            pts.iter().map(|&(t, c, v)| TripletRecord::new(t, c, v)).collect(),
            2.0,
            4.0,
        )
        .unwrap()
    }

    #[test]
    fn triplet_layout() {
        let id = NormalizationStats::identity(2, 1.0);
        assert_eq!(
            encode_triplet(&TripletRecord::new(0.5, 1, 1.2), 2, &id),
            vec![0.5, 0.0, 1.0, 1.2]
        );
    }

    #[test]
    fn empty_context_has_zero_latent() {
        let m = model(Encoding::Triplet, 1);
        assert_eq!(
            m.aggregate_context(&SparseSeries::empty(2.0, 4.0)).unwrap(),
            vec![0.0; 6]
        );
        let p = m.predict_at(&SparseSeries::empty(2.0, 4.0), 3.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn duplicate_record_doubles_latent() {
        let m = model(Encoding::Triplet, 2);
        let one = m.aggregate_context(&ctx(&[(0.7, 0, 1.3)])).unwrap();
        let two = m.aggregate_context(&ctx(&[(0.7, 0, 1.3), (0.7, 0, 1.3)])).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_aggregator_outputs_denormalized_bias() {
        let mut m = model(Encoding::Triplet, 3);
        for l in m.aggregator.layers_mut() {
            l.weight.fill(0.0);
        }
        let last = m.aggregator.layers().len() - 1;
        m.aggregator.layers_mut()[last]
            .bias
            .data_mut()
            .copy_from_slice(&[2.0, -1.0]);
        let p = m.predict_at(&ctx(&[(0.3, 1, 0.2)]), 2.5).unwrap();
        assert_eq!(p, vec![2.0 * 0.5 + 1.0, -0.25 + 0.5]);
    }

    #[test]
    fn query_range_is_enforced() {
        let m = model(Encoding::Triplet, 4);
        assert!(m.predict_at(&ctx(&[]), 6.0).is_ok());
        assert!(m.predict_at(&ctx(&[]), 6.01).is_err());
        assert!(m.predict_at(&ctx(&[]), -0.1).is_err());
    }

    #[test]
    fn grid_encodings_have_one_row_per_grid_point() {
        for enc in [Encoding::GridLinear, Encoding::GridRbf] {
            let m = model(enc, 5);
            let rows = m.encode_context(&ctx(&[(0.3, 1, 0.2), (1.1, 0, 1.4)])).unwrap();
            assert_eq!(rows.len(), 5 * 3);
            // first column is the grid time over t_max
            assert_eq!(rows[3 * 4], 2.0 / 4.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = model(Encoding::GridRbf, 6);
        let back = model_from_checkpoint(
            &sparseset_nn::Checkpoint::from_json(&model_to_checkpoint(&m).unwrap().to_json().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
    }
}
