use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trifuse::decision::predict;
use trifuse::eval::{eval_masks, eval_matrix, SessionCondition};
use trifuse::trainer::fit;
use trifuse::{AblationFlags, Config, ModalityId, ModalityMask, SplitData, TrimodalModel};

fn small() -> (TrimodalModel, SplitData) {
    let mut cfg = Config::default();
    cfg.seed = 11;
    cfg.data.num_identities = 6;
    cfg.data.train_per_identity = 10;
    cfg.data.val_per_identity = 2;
    cfg.data.test_per_identity = 5;
    cfg.model.hidden_dim = 24;
    cfg.model.feature_dim = 16;
    cfg.model.tokens = 4;
    cfg.model.conf_hidden = 4;
    cfg.model.gate_hidden = 8;
    cfg.model.fusion_hidden = 16;
    cfg.model.corr_hidden = 8;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 8;
    let data = SplitData::synthetic(&cfg.synthetic()).unwrap();
    let (model, _) = fit(&data, &cfg, None).unwrap();
    (model, data)
}

#[test]
fn masked_modalities_cannot_leak_into_the_score() {
    let (model, data) = small();
    let face = ModalityMask::only(ModalityId::Face);
    let before = eval_masks(&model, &data.test, &data.multi_session, AblationFlags::default(), &[face], "h").unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut scrambled = data.test.clone();
    for s in &mut scrambled {
        for m in [ModalityId::Gesture, ModalityId::Voice] {
            for v in s.embedding_mut(m) {
                *v = rng.random_range(-10.0..10.0);
            }
        }
    }
    let after = eval_masks(&model, &scrambled, &data.multi_session, AblationFlags::default(), &[face], "h").unwrap();
    assert_eq!(before.cells, after.cells);

    let r = &data.test[0];
    let (a, _) = predict(&model, r, face, AblationFlags::default()).unwrap();
    let (b, _) = predict(&model, &scrambled[0], face, AblationFlags::default()).unwrap();
    assert_eq!(a.p_final, b.p_final);
}

#[test]
fn matrix_agrees_with_per_sample_prediction() {
    let (model, data) = small();
    let report = eval_matrix(&model, &data.test, &data.multi_session, AblationFlags::default(), "h").unwrap();
    assert_eq!(report.cells.len(), 21);
    for mask in ModalityMask::CONDITIONS {
        let mut top1 = 0;
        let mut top5 = 0;
        for s in &data.test {
            let (_, ranked) = predict(&model, s, mask, AblationFlags::default()).unwrap();
            top1 += usize::from(ranked[0] == s.identity);
            top5 += usize::from(ranked[..5].contains(&s.identity));
        }
        let cell = report.cell(&mask, SessionCondition::Overall).unwrap();
        assert_eq!(cell.count, data.test.len());
        assert_eq!(cell.top1_hits, top1, "{mask}");
        assert_eq!(cell.top5_hits, top5, "{mask}");
        let single = report.cell(&mask, SessionCondition::SingleSession).unwrap();
        let multi = report.cell(&mask, SessionCondition::MultiSession).unwrap();
        assert_eq!(single.count + multi.count, cell.count);
        assert_eq!(single.top1_hits + multi.top1_hits, cell.top1_hits);
    }
}
