//! URFC container for RF cubes, compounded ensembles and IQ ensembles.
//!
//! ```text
//! "URFC" | version u8 = 1 | flags u8
//! dims u32 x 4: n_angle, n_time, n_axial, n_lateral
//! metadata f32: f0, fs, prf, c, pitch_axial, pitch_lateral, n_angle angles
//! payload f32: lateral fastest, then axial, time, angle; complex samples
//!              are interleaved (re, im)
//! ```
//!
//! Flags: bit 0 complex, bit 1 compounded ensemble (`n_angle` = 1),
//! bits 2-3 angle subset (0 full, 1 even, 2 odd). All integers and floats
//! little-endian. Values are stored as 32-bit floats, so a round trip is
//! exact for data that is already `f32`-representable.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;

use crate::bytes::ByteCursor;
use crate::error::{Error, Result};
use crate::pipeline::{Acquisition, AngleRfCube, IqEnsemble, Provenance, RfEnsemble};

pub const URFC_MAGIC: [u8; 4] = *b"URFC";
pub const URFC_VERSION: u8 = 1;

const FLAG_COMPLEX: u8 = 1;
const FLAG_ENSEMBLE: u8 = 2;
/// Refuse payloads beyond 2^36 samples.
const MAX_SAMPLES: u64 = 1 << 36;

#[derive(Debug, Clone, PartialEq)]
pub enum Urfc {
    Cube(AngleRfCube),
    Rf(RfEnsemble),
    Iq(IqEnsemble),
}

impl Urfc {
    pub fn kind(&self) -> &'static str {
        match self {
            Urfc::Cube(_) => "angle cube",
            Urfc::Rf(_) => "RF ensemble",
            Urfc::Iq(_) => "IQ ensemble",
        }
    }

    pub fn into_cube(self) -> Result<AngleRfCube> {
        match self {
            Urfc::Cube(c) => Ok(c),
            other => Err(Error::InvalidConfig(format!("expected an angle cube, found an {}", other.kind()))),
        }
    }

    pub fn into_rf(self) -> Result<RfEnsemble> {
        match self {
            Urfc::Rf(e) => Ok(e),
            other => Err(Error::InvalidConfig(format!("expected an RF ensemble, found an {}", other.kind()))),
        }
    }

    pub fn into_iq(self) -> Result<IqEnsemble> {
        match self {
            Urfc::Iq(e) => Ok(e),
            other => Err(Error::InvalidConfig(format!("expected an IQ ensemble, found an {}", other.kind()))),
        }
    }
}

fn provenance_bits(p: Provenance) -> u8 {
    match p {
        Provenance::Full => 0,
        Provenance::Even => 1,
        Provenance::Odd => 2,
    }
}

fn provenance_from(bits: u8) -> Result<Provenance> {
    match bits {
        0 => Ok(Provenance::Full),
        1 => Ok(Provenance::Even),
        2 => Ok(Provenance::Odd),
        _ => Err(Error::InvalidConfig(format!("unknown subset code {bits}"))),
    }
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn header(buf: &mut Vec<u8>, flags: u8, dims: [usize; 4], acq: &Acquisition, angles: &[f64]) -> Result<()> {
    buf.extend_from_slice(&URFC_MAGIC);
    buf.push(URFC_VERSION);
    buf.push(flags);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow(dims.iter().map(|&v| v as u32).collect()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in [acq.f0, acq.fs, acq.prf, acq.c, acq.pitch_axial, acq.pitch_lateral] {
        put_f32(buf, v);
    }
    for &a in angles {
        put_f32(buf, a);
    }
    Ok(())
}

pub fn encode(data: &Urfc) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match data {
        Urfc::Cube(c) => {
            let dims = [c.n_angle(), c.n_time(), c.n_axial(), c.n_lateral()];
            header(&mut buf, provenance_bits(c.subset()) << 2, dims, c.acquisition(), c.angles())?;
            c.data().iter().for_each(|&v| put_f32(&mut buf, v));
        }
        Urfc::Rf(e) => {
            let dims = [1, e.n_time(), e.n_axial(), e.n_lateral()];
            let flags = FLAG_ENSEMBLE | provenance_bits(e.provenance()) << 2;
            header(&mut buf, flags, dims, e.acquisition(), &[0.0])?;
            e.data().iter().for_each(|&v| put_f32(&mut buf, v));
        }
        Urfc::Iq(e) => {
            let dims = [1, e.n_time(), e.n_axial(), e.n_lateral()];
            let flags = FLAG_COMPLEX | FLAG_ENSEMBLE | provenance_bits(e.provenance()) << 2;
            header(&mut buf, flags, dims, e.acquisition(), &[0.0])?;
            for z in e.data() {
                put_f32(&mut buf, z.re);
                put_f32(&mut buf, z.im);
            }
        }
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Urfc> {
    let mut cur = ByteCursor::new(bytes);
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != URFC_MAGIC {
        return Err(Error::BadMagic {
            expected: URFC_MAGIC,
            found: magic,
        });
    }
    let version = cur.u8()?;
    if version != URFC_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = cur.u8()?;
    if flags & !0b1111 != 0 {
        return Err(Error::InvalidConfig(format!("unknown flag bits {flags:#010b}")));
    }
    let complex = flags & FLAG_COMPLEX != 0;
    let ensemble = flags & FLAG_ENSEMBLE != 0;
    let provenance = provenance_from((flags >> 2) & 0b11)?;
    let dims = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?];
    let samples = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .and_then(|n| n.checked_mul(if complex { 2 } else { 1 }))
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or_else(|| Error::DimOverflow(dims.to_vec()))?;
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!("zero dimension in {dims:?}")));
    }
    if (ensemble || complex) && dims[0] != 1 {
        return Err(Error::InvalidConfig(format!("ensemble with n_angle = {}", dims[0])));
    }
    if complex && !ensemble {
        return Err(Error::InvalidConfig("complex angle cubes are not supported".into()));
    }
    let mut meta = [0.0; 6];
    for m in &mut meta {
        *m = cur.f32()? as f64;
    }
    let acq = Acquisition {
        f0: meta[0],
        fs: meta[1],
        prf: meta[2],
        c: meta[3],
        pitch_axial: meta[4],
        pitch_lateral: meta[5],
    };
    let angles = (0..dims[0]).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    let needed = usize::try_from(samples)
        .ok()
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::DimOverflow(dims.to_vec()))?;
    let raw = cur.take(needed)?;
    if cur.remaining() != 0 {
        return Err(Error::InvalidConfig(format!("{} trailing bytes after payload", cur.remaining())));
    }
    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let [_, nt, na, nl] = dims.map(|d| d as usize);
    Ok(if complex {
        let v: Vec<f64> = values.collect();
        let z = v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        Urfc::Iq(IqEnsemble::new(nt, na, nl, acq, provenance, z)?)
    } else if ensemble {
        Urfc::Rf(RfEnsemble::new(nt, na, nl, acq, provenance, values.collect())?)
    } else {
        Urfc::Cube(AngleRfCube::new(angles, nt, na, nl, acq, values.collect())?.with_subset(provenance))
    })
}

pub fn write_urfc<W: Write>(mut w: W, data: &Urfc) -> Result<()> {
    w.write_all(&encode(data)?)?;
    Ok(())
}

pub fn read_urfc<R: Read>(mut r: R) -> Result<Urfc> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save_urfc(path: impl AsRef<Path>, data: &Urfc) -> Result<()> {
    fs::write(path, encode(data)?)?;
    Ok(())
}

pub fn load_urfc(path: impl AsRef<Path>) -> Result<Urfc> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acq() -> Acquisition {
        Acquisition {
            f0: 5.0e6,
            fs: 20.0e6,
            prf: 500.0,
            c: 1540.0,
            pitch_axial: 0.25,
            pitch_lateral: 0.5,
        }
    }

    fn cube() -> AngleRfCube {
        let data = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.5 - 7.0).collect();
        AngleRfCube::new(vec![-1.0, 1.0], 3, 4, 5, acq(), data).unwrap().with_subset(Provenance::Odd)
    }

    #[test]
    fn round_trips() {
        let c = Urfc::Cube(cube());
        assert_eq!(decode(&encode(&c).unwrap()).unwrap(), c);
        let rf = Urfc::Rf(RfEnsemble::new(2, 2, 3, acq(), Provenance::Even, vec![1.0, -2.0, 3.5, 0.0, 8.0, 0.25, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        assert_eq!(decode(&encode(&rf).unwrap()).unwrap(), rf);
        let iq = Urfc::Iq(IqEnsemble::new(1, 1, 2, acq(), Provenance::Full, vec![Complex64::new(1.0, -1.0), Complex64::new(0.5, 2.0)]).unwrap());
        assert_eq!(decode(&encode(&iq).unwrap()).unwrap(), iq);
    }

    #[test]
    fn errors_are_distinct() {
        let bytes = encode(&Urfc::Cube(cube())).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(decode(&ver), Err(Error::UnsupportedVersion(2))));
        assert!(matches!(decode(&bytes[..bytes.len() - 4]), Err(Error::Truncated { .. })));
        let mut huge = bytes.clone();
        for i in 6..22 {
            huge[i] = 0xff;
        }
        assert!(matches!(decode(&huge), Err(Error::DimOverflow(_))));
    }
}
