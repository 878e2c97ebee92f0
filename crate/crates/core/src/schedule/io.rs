use std::fmt::Write as _;
use std::io::{Read, Write};

use super::{LossLedger, NoiseSchedule};
use crate::error::{Error, Result};

pub const SCHEDULE_MAGIC: [u8; 8] = *b"SDQSCHED";
pub const SCHEDULE_VERSION: u32 = 1;

/// Writes the container: magic, version (u32), T (u64), n (u64), then the
/// `(T+1) × n` grid as row-major little-endian f64.
pub fn write_schedule(w: &mut impl Write, schedule: &NoiseSchedule) -> Result<()> {
    w.write_all(&SCHEDULE_MAGIC)?;
    w.write_all(&SCHEDULE_VERSION.to_le_bytes())?;
    w.write_all(&(schedule.steps() as u64).to_le_bytes())?;
    w.write_all(&(schedule.positions() as u64).to_le_bytes())?;
    for v in schedule.grid() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_schedule(r: &mut impl Read) -> Result<NoiseSchedule> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != SCHEDULE_MAGIC {
        return Err(Error::Format("not a schedule container (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != SCHEDULE_VERSION {
        return Err(Error::Format(format!("unsupported schedule version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let steps = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let positions = u64::from_le_bytes(b8) as usize;
    let count = steps
        .checked_add(1)
        .and_then(|s| s.checked_mul(positions))
        .filter(|&c| c <= 1 << 28)
        .ok_or_else(|| Error::Format(format!("implausible schedule size T={steps}, n={positions}")))?;
    let mut grid = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        grid.push(f64::from_le_bytes(b8));
    }
    NoiseSchedule::from_grid(steps, positions, grid)
}

/// CSV with columns `t,i,alpha_bar,loss_mean` for the selected positions;
/// `loss_mean` is empty where nothing was recorded.
pub fn schedule_csv(schedule: &NoiseSchedule, ledger: Option<&LossLedger>, positions: &[usize]) -> Result<String> {
    if let Some(&bad) = positions.iter().find(|&&i| i >= schedule.positions()) {
        return Err(Error::InvalidArgument(format!(
            "position {bad} outside 0..{}",
            schedule.positions()
        )));
    }
    let mut out = String::from("t,i,alpha_bar,loss_mean\n");
    for &i in positions {
        for t in 0..=schedule.steps() {
            let loss = ledger
                .filter(|_| t >= 1)
                .and_then(|l| l.mean(t, i))
                .map(|v| v.to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "{t},{i},{},{loss}", schedule.alpha_bar(t, i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip_is_exact() {
        let s = NoiseSchedule::sqrt_init(37, 3, 1e-4).unwrap();
        let mut buf = Vec::new();
        write_schedule(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 16 + 38 * 3 * 8);
        let back = read_schedule(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut again = Vec::new();
        write_schedule(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let s = NoiseSchedule::sqrt_init(5, 1, 1e-4).unwrap();
        let mut buf = Vec::new();
        write_schedule(&mut buf, &s).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_schedule(&mut bad.as_slice()).is_err());
        assert!(read_schedule(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn csv_rows_and_missing_losses() {
        let s = NoiseSchedule::sqrt_init(10, 4, 1e-4).unwrap();
        let mut l = LossLedger::new(10, 4, 0.99).unwrap();
        l.record(3, 1, 0.5, false);
        let csv = schedule_csv(&s, Some(&l), &[1, 2]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 11 * 2);
        assert!(lines[4].starts_with("3,1,") && lines[4].ends_with(",0.5"));
        assert!(lines[5].ends_with(','));
        assert!(schedule_csv(&s, None, &[4]).is_err());
    }
}
