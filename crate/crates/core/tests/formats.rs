use proptest::prelude::*;

use ha2ha::autodiff::{ParamKind, ParamStore, Tensor4};
use ha2ha::doppler::GrayImage;
use ha2ha::io::images::{decode_pgm, encode_pgm};
use ha2ha::io::urfc::{decode, encode};
use ha2ha::io::Urfc;
use ha2ha::pipeline::{Acquisition, AngleRfCube, IqEnsemble, Provenance, RfEnsemble};
use rustfft::num_complex::Complex64;

// f32 storage: only f32-representable values survive bit for bit
fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()).prop_map(f64::from), n)
}

fn acquisition() -> impl Strategy<Value = Acquisition> {
    prop::array::uniform6(1e-6f32..1e8f32).prop_map(|m| Acquisition {
        f0: m[0].into(),
        fs: m[1].into(),
        prf: m[2].into(),
        c: m[3].into(),
        pitch_axial: m[4].into(),
        pitch_lateral: m[5].into(),
    })
}

fn provenance() -> impl Strategy<Value = Provenance> {
    prop_oneof![Just(Provenance::Full), Just(Provenance::Even), Just(Provenance::Odd)]
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..6, 1usize..6, 1usize..6)
}

fn cube() -> impl Strategy<Value = AngleRfCube> {
    (1usize..5, dims(), acquisition(), provenance()).prop_flat_map(|(na, (nt, nz, nx), acq, prov)| {
        let n = nt * nz * nx;
        (prop::collection::btree_set(-90i16..90, na), f32_values(na * n)).prop_map(move |(angles, data)| {
            let angles: Vec<f64> = angles.into_iter().map(|a| f64::from(a) * 0.5).collect();
            let data = data[..angles.len() * n].to_vec();
            AngleRfCube::new(angles, nt, nz, nx, acq, data).unwrap().with_subset(prov)
        })
    })
}

fn rf() -> impl Strategy<Value = RfEnsemble> {
    (dims(), acquisition(), provenance()).prop_flat_map(|((nt, nz, nx), acq, prov)| {
        f32_values(nt * nz * nx).prop_map(move |d| RfEnsemble::new(nt, nz, nx, acq, prov, d).unwrap())
    })
}

fn iq() -> impl Strategy<Value = IqEnsemble> {
    (dims(), acquisition(), provenance()).prop_flat_map(|((nt, nz, nx), acq, prov)| {
        f32_values(2 * nt * nz * nx).prop_map(move |d| {
            let z = d.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
            IqEnsemble::new(nt, nz, nx, acq, prov, z).unwrap()
        })
    })
}

fn param_store() -> impl Strategy<Value = ParamStore> {
    let kind = prop_oneof![
        Just(ParamKind::Weight),
        Just(ParamKind::Bias),
        Just(ParamKind::BnScale),
        Just(ParamKind::BnShift),
        Just(ParamKind::RunningMean),
        Just(ParamKind::RunningVar),
        Just(ParamKind::BnSteps),
    ];
    let param = ("[a-z][a-z0-9_.]{0,16}", kind, prop::array::uniform4(1usize..4))
        .prop_flat_map(|(name, kind, shape)| (Just(name), Just(kind), Just(shape), f32_values(shape.iter().product())));
    prop::collection::vec(param, 0..8).prop_map(|ps| {
        let mut store = ParamStore::new();
        for (name, kind, shape, data) in ps {
            store.add(name, kind, Tensor4::from_vec(shape, data).unwrap());
        }
        store
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cube_round_trip_is_exact(c in cube()) {
        let bytes = encode(&Urfc::Cube(c.clone())).unwrap();
        let back = decode(&bytes).unwrap().into_cube().unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(encode(&Urfc::Cube(back)).unwrap(), bytes);
    }

    #[test]
    fn rf_round_trip_is_exact(e in rf()) {
        let bytes = encode(&Urfc::Rf(e.clone())).unwrap();
        let back = decode(&bytes).unwrap().into_rf().unwrap();
        prop_assert_eq!(&back, &e);
        prop_assert_eq!(encode(&Urfc::Rf(back)).unwrap(), bytes);
    }

    #[test]
    fn iq_round_trip_is_exact(e in iq()) {
        let bytes = encode(&Urfc::Iq(e.clone())).unwrap();
        let back = decode(&bytes).unwrap().into_iq().unwrap();
        prop_assert_eq!(&back, &e);
    }

    #[test]
    fn checkpoint_round_trip_is_exact(store in param_store()) {
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        let back = ParamStore::read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &store);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn truncated_urfc_is_an_error(e in rf(), cut in 0.0f64..1.0) {
        let bytes = encode(&Urfc::Rf(e)).unwrap();
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assert!(decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..96)) {
        let _ = decode(&bytes);
        let _ = ParamStore::read_checkpoint(bytes.as_slice());
        let _ = decode_pgm(&bytes);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) as u8).collect();
        let img = GrayImage { width: w, height: h, pixels };
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        prop_assert_eq!(back, img);
    }
}
