use candle_core::{Device, Tensor};
use s2p_core::conditioning::{drop_sketch, make_concat1, make_concat3, ConditionBundle, Variant};
use s2p_core::image::EdgeMap;
use s2p_core::params::seeded_rng;
use s2p_core::schedule::{NoiseSchedule, ScheduleKind};

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn concat1_maps_blank_and_full_maps_to_the_ends() {
    let dev = Device::Cpu;
    let zeros = make_concat1(&EdgeMap::zeros(64, 64), (16, 16), &dev).unwrap();
    assert_eq!(zeros.dims(), &[1, 16, 16]);
    assert!(values(&zeros).iter().all(|&v| v == -1.0));
    let ones = EdgeMap::new(64, 64, vec![1.0; 64 * 64]).unwrap();
    assert!(values(&make_concat1(&ones, (16, 16), &dev).unwrap()).iter().all(|&v| v == 1.0));
    assert!(make_concat1(&ones, (10, 10), &dev).is_err());
}

#[test]
fn block_means_are_mapped_affinely() {
    // 2x2 blocks {1,0;0,1}: top-left and bottom-right full, others empty.
    let data = [
        1.0, 1.0, 0.0, 0.0, //
        1.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 1.0, //
        0.0, 0.0, 1.0, 1.0,
    ];
    let e = EdgeMap::new(4, 4, data.to_vec()).unwrap();
    assert_eq!(values(&make_concat1(&e, (2, 2), &Device::Cpu).unwrap()), [1.0, -1.0, -1.0, 1.0]);
    let checker = EdgeMap::new(4, 4, (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect()).unwrap();
    assert!(values(&make_concat1(&checker, (2, 2), &Device::Cpu).unwrap()).iter().all(|&v| v == 0.0));
}

#[test]
fn concat3_level_zero_is_three_clean_copies() {
    let dev = Device::Cpu;
    let aug = NoiseSchedule::new(100, ScheduleKind::Linear).unwrap();
    let e = EdgeMap::new(8, 8, (0..64).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
    let clean = values(&make_concat1(&e, (4, 4), &dev).unwrap());
    let (c, level) = make_concat3(&e, (4, 4), 0, &aug, &mut seeded_rng(0), &dev).unwrap();
    assert_eq!(level, 0);
    assert_eq!(c.dims(), &[3, 4, 4]);
    assert_eq!(values(&c), [clean.clone(), clean.clone(), clean].concat());
    let (noisy, level) = make_concat3(&e, (4, 4), 40, &aug, &mut seeded_rng(0), &dev).unwrap();
    assert_eq!(level, 40);
    assert_ne!(values(&noisy), values(&c));
    assert!(make_concat3(&e, (4, 4), 100, &aug, &mut seeded_rng(0), &dev).is_err());
}

#[test]
fn drop_rates() {
    let c = Tensor::ones((1, 4, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
    let mut rng = seeded_rng(8);
    for _ in 0..50 {
        let (kept, dropped) = drop_sketch(&c, 0.0, &mut rng).unwrap();
        assert!(!dropped);
        assert_eq!(values(&kept), values(&c));
        let (zeroed, dropped) = drop_sketch(&c, 1.0, &mut rng).unwrap();
        assert!(dropped);
        assert!(values(&zeroed).iter().all(|&v| v == 0.0));
    }
    let drops = (0..10_000).filter(|_| drop_sketch(&c, 0.1, &mut rng).unwrap().1).count();
    assert!((drops as f64 / 10_000.0 - 0.1).abs() <= 0.02, "{drops}");
    assert!(drop_sketch(&c, 1.5, &mut rng).is_err());
}

#[test]
fn bundles_validate_shapes() {
    let dev = Device::Cpu;
    let text = Tensor::zeros((6, 8), candle_core::DType::F32, &dev).unwrap();
    let one = Tensor::zeros((1, 4, 4), candle_core::DType::F32, &dev).unwrap();
    let three = Tensor::zeros((3, 4, 4), candle_core::DType::F32, &dev).unwrap();
    assert!(ConditionBundle::new(one.clone(), text.clone(), None, Variant::Concat1).is_ok());
    assert!(ConditionBundle::new(three.clone(), text.clone(), Some(5), Variant::Concat3).is_ok());
    assert!(ConditionBundle::new(three, text.clone(), None, Variant::Concat3).is_err());
    assert!(ConditionBundle::new(one, text, Some(1), Variant::Concat1).is_err());
    assert_eq!("concat3".parse::<Variant>().unwrap(), Variant::Concat3);
    assert!("concat2".parse::<Variant>().is_err());
}
