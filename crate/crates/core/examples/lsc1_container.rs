//! Encode a batch into an LSC1 container, frame it, and read it back.
//!
//! cargo run --example lsc1_container

use std::io::Cursor;

use detstream::wire::{decode_container, decode_frame, encode_container, encode_frame, Array, Batch, Compression};

fn main() {
    let mut batch = Batch::new();
    let image: Vec<u16> = (0..4 * 8 * 8).map(|i| (i % 251) as u16).collect();
    batch.insert("/data/det".into(), Array::from_slice(vec![4, 8, 8], &image).unwrap());
    batch.insert("/data/id".into(), Array::from_slice(vec![4], &[10u64, 11, 12, 13]).unwrap());
    batch.insert("/data/energy".into(), Array::from_slice(vec![4], &[9.5f64, 9.6, 9.4, 9.5]).unwrap());

    for compression in [Compression::None, Compression::Deflate { level: 6 }] {
        let blob = encode_container(&batch, compression).unwrap();
        // encoding is deterministic
        assert_eq!(blob, encode_container(&batch, compression).unwrap());
        let frame = encode_frame(&blob).unwrap();
        let payload = decode_frame(&mut Cursor::new(&frame), u64::MAX).unwrap().unwrap();
        let back = decode_container(&payload).unwrap();
        assert_eq!(back, batch);
        println!("{compression:?}: {} bytes in a {}-byte frame", blob.len(), frame.len());
    }
    for (path, a) in &batch {
        println!("{path}: {} {:?}", a.dtype, a.shape);
    }

    let mut torn = encode_container(&batch, Compression::None).unwrap();
    torn.truncate(torn.len() - 3);
    println!("truncated blob: {}", decode_container(&torn).unwrap_err());
}
