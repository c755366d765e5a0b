use std::io::{Read, Write};

use super::{BudgetGrid, NodeValues, Solution, ValueGrid};
use crate::error::{Error, Result};
use crate::model::ProblemSpec;

const MAGIC: &[u8; 8] = b"BSPDEVG\0";
const VERSION: u32 = 1;

/// One row per (stage, node, inside grid point):
/// `stage, node_id, y_1..y_n, J, dJ_1..dJ_n, v_1..v_n`.
pub fn write_solution_csv<W: Write>(solution: &Solution, writer: W) -> Result<()> {
    let grid = &solution.grid;
    let n = grid.dim();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["stage".to_string(), "node_id".to_string()];
    header.extend((1..=n).map(|i| format!("y_{i}")));
    header.push("J".into());
    header.extend((1..=n).map(|i| format!("dJ_{i}")));
    header.extend((1..=n).map(|i| format!("v_{i}")));
    w.write_record(&header)?;
    for stage in &solution.stages {
        for (j, node) in stage.nodes.iter().enumerate() {
            for p in (0..grid.len()).filter(|p| grid.inside[*p]) {
                let mut row = vec![stage.stage.to_string(), j.to_string()];
                row.extend(grid.point(p).iter().map(f64::to_string));
                row.push(node.value[p].to_string());
                row.extend(node.gradient[p * n..(p + 1) * n].iter().map(f64::to_string));
                row.extend(node.rate[p * n..(p + 1) * n].iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Binary cache: magic, version, problem as JSON, knots, then per stage and
/// node the value, gradient and rate arrays. Little-endian, row-major.
pub fn write_cache<W: Write>(solution: &Solution, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let problem = serde_json::to_vec(&solution.problem).map_err(|e| Error::InvalidInput(e.to_string()))?;
    put_u64(&mut w, problem.len() as u64)?;
    w.write_all(&problem)?;
    put_u64(&mut w, solution.grid.dim() as u64)?;
    for axis in &solution.grid.knots {
        put_f64s(&mut w, axis)?;
    }
    put_u64(&mut w, solution.stages.len() as u64)?;
    for stage in &solution.stages {
        put_u64(&mut w, stage.stage as u64)?;
        w.write_all(&stage.time.to_le_bytes())?;
        put_u64(&mut w, stage.nodes.len() as u64)?;
        for node in &stage.nodes {
            put_f64s(&mut w, &node.value)?;
            put_f64s(&mut w, &node.gradient)?;
            put_f64s(&mut w, &node.rate)?;
        }
    }
    Ok(())
}

pub fn read_cache<R: Read>(mut r: R) -> Result<Solution> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput("not a value-grid cache".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::InvalidInput(format!("unsupported cache version {version}")));
    }
    let len = get_len(&mut r)?;
    let mut problem = vec![0u8; len];
    r.read_exact(&mut problem)?;
    let problem: ProblemSpec = serde_json::from_slice(&problem).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let dim = get_len(&mut r)?;
    let knots = (0..dim).map(|_| get_f64s(&mut r)).collect::<Result<Vec<_>>>()?;
    let grid = BudgetGrid::from_knots(&problem.feasible_set, knots)?;
    let count = get_len(&mut r)?;
    let mut stages = Vec::with_capacity(count);
    for _ in 0..count {
        let stage = get_len(&mut r)?;
        let time = get_f64(&mut r)?;
        let nodes = (0..get_len(&mut r)?)
            .map(|_| {
                Ok(NodeValues {
                    value: get_f64s(&mut r)?,
                    gradient: get_f64s(&mut r)?,
                    rate: get_f64s(&mut r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if nodes.iter().any(|nv| {
            nv.value.len() != grid.len() || nv.gradient.len() != grid.len() * dim || nv.rate.len() != grid.len() * dim
        }) {
            return Err(Error::InvalidInput("cache arrays do not match the grid".into()));
        }
        stages.push(ValueGrid { stage, time, nodes });
    }
    Ok(Solution { problem, grid, stages })
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    put_u64(w, values.len() as u64)?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_len<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::InvalidInput("cache length overflow".into()))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let len = get_len(r)?;
    if len > 1 << 32 {
        return Err(Error::InvalidInput("implausible array length in cache".into()));
    }
    (0..len).map(|_| get_f64(r)).collect()
}
