use std::path::Path;

use ndarray::{Array3, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use proptest::prelude::*;
use ribeval::io::{
    encode_nifti, load_labels, load_nifti, load_nifti_labels, load_raw, load_raw_labels, load_volume, read_nifti,
    save_nifti, save_raw, save_raw_as, save_raw_labels, Dtype, Image, Voxels,
};
use ribeval::{Dims, Error, LabelMap, Spacing, Volume, VolumeKind};

fn ramp(nx: usize, ny: usize, nz: usize) -> Array3<f32> {
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| (x as f32) - 2.5 * y as f32 + 100.0 * z as f32)
}

fn written_by_reference(path: &Path, data: &Array3<f32>) {
    let header = NiftiHeader {
        pixdim: [1.0, 0.75, 0.5, 2.5, 1.0, 1.0, 1.0, 1.0],
        ..NiftiHeader::default()
    };
    WriterOptions::new(path).reference_header(&header).write_nifti(data).unwrap();
}

#[test]
fn reads_files_from_reference_writer() {
    let dir = tempfile::tempdir().unwrap();
    let data = ramp(5, 4, 3);
    for name in ["a.nii", "b.nii.gz"] {
        let path = dir.path().join(name);
        written_by_reference(&path, &data);
        if name.ends_with(".gz") {
            assert_eq!(&std::fs::read(&path).unwrap()[..2], &[0x1f, 0x8b]);
        }
        let vol = load_nifti(&path, VolumeKind::IntensityHu).unwrap();
        assert_eq!(vol.dims(), Dims::new(5, 4, 3).unwrap());
        assert_eq!(vol.spacing().0, [0.75, 0.5, 2.5]);
        for ((x, y, z), v) in data.indexed_iter() {
            assert_eq!(vol.get([x, y, z]), *v, "{name} at {x},{y},{z}");
        }
    }
}

#[test]
fn reference_reader_accepts_our_files() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(6, 3, 4).unwrap();
    let spacing = Spacing::new([0.8, 0.8, 1.25]).unwrap();
    let vol = Volume::from_fn(dims, spacing, VolumeKind::IntensityHu, |[x, y, z]| {
        x as f32 * 10.0 - y as f32 + z as f32 * 300.0 - 1000.0
    })
    .unwrap();
    for (name, dtype) in [("f.nii", Dtype::F32), ("i.nii.gz", Dtype::I16)] {
        let path = dir.path().join(name);
        save_nifti(&Image::from_volume(&vol, dtype).unwrap(), &path).unwrap();
        let obj = ReaderOptions::new().read_file(&path).unwrap();
        assert_eq!(&obj.header().pixdim[1..4], &[0.8, 0.8, 1.25]);
        let arr = obj.into_volume().into_ndarray::<f32>().unwrap();
        assert_eq!(arr.shape(), &[6, 3, 4]);
        for x in 0..6 {
            for y in 0..3 {
                for z in 0..4 {
                    assert_eq!(arr[IxDyn(&[x, y, z])], vol.get([x, y, z]));
                }
            }
        }
    }
}

#[test]
fn labels_survive_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(7, 5, 3).unwrap();
    let labels = LabelMap::from_fn(dims, Spacing::UNIT, |[x, y, z]| ((x + 2 * y + z) % 5) as u32 * 9000);
    let nii = dir.path().join("l.nii.gz");
    save_nifti(&Image::from_label_map(&labels).unwrap(), &nii).unwrap();
    assert_eq!(read_nifti(&nii).unwrap().dtype(), Dtype::I32);
    assert_eq!(load_nifti_labels(&nii).unwrap(), labels);
    assert_eq!(load_labels(&nii).unwrap(), labels);

    let raw = dir.path().join("l.json");
    save_raw_labels(&labels, &raw).unwrap();
    assert_eq!(load_raw_labels(&raw).unwrap(), labels);
    assert_eq!(load_labels(&dir.path().join("l.bin")).unwrap(), labels);
}

#[test]
fn fractional_labels_rejected() {
    let dims = Dims::cube(2).unwrap();
    let img = Image::new(dims, Spacing::UNIT, Voxels::F32(vec![0.0, 1.0, 1.5, 2.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
    let bytes = encode_nifti(&img).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.nii");
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_nifti_labels(&path), Err(Error::InvalidVolume(_))));
}

#[test]
fn raw_kind_hint_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let vol = Volume::filled(Dims::cube(3).unwrap(), Spacing::UNIT, VolumeKind::Probability, 0.25).unwrap();
    save_raw(&vol, &path).unwrap();
    assert_eq!(load_volume(&path, Some(VolumeKind::Probability)).unwrap(), vol);
    assert!(matches!(
        load_volume(&path, Some(VolumeKind::Binary)),
        Err(Error::KindMismatch { .. })
    ));
}

fn kind_and_dtype() -> impl Strategy<Value = (VolumeKind, Dtype)> {
    prop_oneof![
        Just((VolumeKind::IntensityHu, Dtype::I16)),
        Just((VolumeKind::IntensityHu, Dtype::F32)),
        Just((VolumeKind::Probability, Dtype::F32)),
        Just((VolumeKind::Binary, Dtype::U8)),
        Just((VolumeKind::Normalized, Dtype::F32)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn raw_round_trip_is_bit_exact(
        nx in 1usize..9, ny in 1usize..9, nz in 1usize..9,
        sx in 0.1f64..5.0, sy in 0.1f64..5.0, sz in 0.1f64..5.0,
        (kind, dtype) in kind_and_dtype(),
        seed in any::<u64>(),
    ) {
        let dims = Dims::new(nx, ny, nz).unwrap();
        let spacing = Spacing::new([sx, sy, sz]).unwrap();
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let vol = Volume::from_fn(dims, spacing, kind, |_| {
            let r = next();
            match (kind, dtype) {
                (VolumeKind::Binary, _) => (r & 1) as f32,
                (_, Dtype::I16) => (r % 4000) as f32 - 1024.0,
                (VolumeKind::Probability, _) => (r % 1_000_001) as f32 / 1_000_000.0,
                (VolumeKind::Normalized, _) => (r % 2001) as f32 / 1000.0 - 1.0,
                _ => f32::from_bits((r as u32 & 0x3fff_ffff) | 0x0080_0000) * if r & (1 << 40) != 0 { -1.0 } else { 1.0 },
            }
        }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v");
        save_raw_as(&vol, &path, dtype).unwrap();
        let back = load_raw(&path).unwrap();
        prop_assert_eq!(back.dims(), vol.dims());
        prop_assert_eq!(back.spacing(), vol.spacing());
        prop_assert_eq!(back.kind(), kind);
        prop_assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let nii = dir.path().join("v.nii.gz");
        save_nifti(&Image::from_volume(&vol, dtype).unwrap(), &nii).unwrap();
        let back = load_nifti(&nii, kind).unwrap();
        prop_assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
