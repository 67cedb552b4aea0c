//! Fixed-size cells: a 2-byte big-endian true length, then `capacity` bytes.

/// Splits `payload` into `ceil(len / capacity)` cells, at least one.
///
/// # Panics
/// If `cell_capacity` is zero or exceeds `u16::MAX`.
pub fn fragment(payload: &[u8], cell_capacity: usize) -> Vec<Vec<u8>> {
    assert!(
        (1..=u16::MAX as usize).contains(&cell_capacity),
        "cell capacity must be in 1..=65535"
    );
    let chunks: Vec<&[u8]> = if payload.is_empty() {
        vec![&[]]
    } else {
        payload.chunks(cell_capacity).collect()
    };
    chunks
        .into_iter()
        .map(|chunk| {
            let mut cell = Vec::with_capacity(2 + cell_capacity);
            cell.extend_from_slice(&(chunk.len() as u16).to_be_bytes());
            cell.extend_from_slice(chunk);
            cell.resize(2 + cell_capacity, 0);
            cell
        })
        .collect()
}

/// Concatenates the true-length prefixes of `cells`. Returns `None` on a
/// malformed cell.
pub fn reassemble<C: AsRef<[u8]>>(cells: &[C]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    for cell in cells {
        let cell = cell.as_ref();
        if cell.len() < 2 {
            return None;
        }
        let len = u16::from_be_bytes([cell[0], cell[1]]) as usize;
        out.extend_from_slice(cell.get(2..2 + len)?);
    }
    Some(out)
}
