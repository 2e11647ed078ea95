use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use xder::buffer::RehearsalBuffer;
use xder::metrics::AccuracyMatrix;
use xder::model::Mlp;
use xder::stream::{generate_blob_stream, load_dataset, write_dataset, BlobStreamSpec};
use xder::trainer::{run_sequence, Method, TrainConfig};

fn small_run(method: Method) -> xder::trainer::RunResult {
    let stream = generate_blob_stream(&BlobStreamSpec::new(3, 2, 20, 4, 4.0, 11)).unwrap();
    let mut cfg = TrainConfig::new(method);
    cfg.epochs = 2;
    cfg.capacity = if method.uses_buffer() { 12 } else { 0 };
    cfg.hidden = vec![8];
    run_sequence(&stream, &cfg).unwrap()
}

#[test]
fn buffer_and_checkpoints_survive_files() {
    let run = small_run(Method::Xder);
    let dir = tempfile::tempdir().unwrap();

    let path = dir.path().join("buffer.bin");
    let buf = run.buffer.as_ref().unwrap();
    buf.write_to(BufWriter::new(File::create(&path).unwrap())).unwrap();
    let back = RehearsalBuffer::read_from(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(back.capacity(), buf.capacity());
    assert_eq!(back.entries(), buf.entries());

    for (t, m) in run.checkpoints.iter().enumerate() {
        let path = dir.path().join(format!("task_{t}.ckpt"));
        m.write_checkpoint(BufWriter::new(File::create(&path).unwrap())).unwrap();
        let back = Mlp::read_checkpoint(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(back.sizes(), m.sizes());
        assert!(back.params().iter().zip(m.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn accuracy_matrix_csv_round_trip() {
    let run = small_run(Method::Er);
    let text = run.matrix.to_csv();
    assert_eq!(text.lines().next().unwrap(), "task,after_0,after_1,after_2");
    assert_eq!(AccuracyMatrix::from_csv(&text).unwrap(), run.matrix);
}

#[test]
fn dataset_file_reloads_as_the_same_classes() {
    let stream = generate_blob_stream(&BlobStreamSpec::new(2, 3, 10, 3, 4.0, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blobs.txt");
    let mut f = BufWriter::new(File::create(&path).unwrap());
    write_dataset(&stream.to_dataset(), &mut f).unwrap();
    f.flush().unwrap();
    drop(f);

    let loaded = load_dataset(&path, 2, 3, 0).unwrap();
    assert_eq!(loaded.num_classes(), 6);
    assert_eq!(loaded.feature_dim(), 3);
    let total = |s: &xder::stream::TaskStream| s.tasks().iter().map(|t| t.train.len() + t.test.len()).sum::<usize>();
    assert_eq!(total(&loaded), total(&stream));

    std::fs::write(&path, "d=3 n=1 classes=2\n0 1.0 2.0\n").unwrap();
    assert!(load_dataset(&path, 1, 2, 0).is_err());
}
