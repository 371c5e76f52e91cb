//! An interrupted run resumed from checkpoint bytes matches an uninterrupted one.

use gaze_redirect::config::RunConfig;
use gaze_redirect::data::build_corpus;
use gaze_redirect::data::checkpoint::{decode, encode};
use gaze_redirect::training::{CoarseTrainer, FineTrainer};

#[test]
fn interrupted_run_reproduces_uninterrupted_run() {
    let mut cfg = RunConfig::smoke();
    cfg.train.coarse_iters = 20;
    cfg.train.fine_iters = 20;
    // The resume point sits inside the GAN learning-rate decay.
    cfg.train.decay_start_iter = 6;
    let (train, _) = build_corpus(&cfg).unwrap();
    let run = |resume: Option<usize>| {
        let mut t = CoarseTrainer::new(&cfg).unwrap();
        let mut tr = Vec::new();
        while t.iteration() < 20 {
            if Some(t.iteration()) == resume {
                tr.extend_from_slice(t.trace());
                t = CoarseTrainer::from_checkpoint(&decode(&encode(&t.checkpoint()).unwrap()).unwrap()).unwrap();
            }
            t.step(&train).unwrap();
        }
        tr.extend_from_slice(t.trace());
        let c = gaze_redirect::training::coarse_model_from_checkpoint(&t.checkpoint()).unwrap();
        let mut f = FineTrainer::new(&cfg, c.clone()).unwrap();
        let mut ft = Vec::new();
        while f.iteration() < 20 {
            if Some(f.iteration()) == resume {
                ft.extend_from_slice(f.trace());
                f = FineTrainer::from_checkpoint(&decode(&encode(&f.checkpoint()).unwrap()).unwrap()).unwrap();
            }
            f.step(&train).unwrap();
        }
        ft.extend_from_slice(f.trace());
        // Traces are the rows logged before the interruption plus those after it.
        (tr, c.params, ft, f.checkpoint())
    };
    let a = run(None);
    let b = run(Some(10));
    assert!(a.0 == b.0, "coarse trace");
    assert!(a.1 == b.1, "coarse params");
    assert!(a.2 == b.2, "fine trace");
    assert!(a.3 == b.3, "fine ckpt");
}
