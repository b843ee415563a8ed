//! Object-granular guest memory.
//!
//! Every allocation is a separate object with exact bounds. Each object keeps
//! a pointer map: the set of 8-byte aligned word offsets whose last
//! full-width write was a pointer. Pointers are stored in the object bytes as
//! `(object id << 32) | offset`, little-endian.
//!
//! Objects are held behind `Arc`s in a persistent map, so a snapshot is a
//! cheap clone of the map and the first write to an object after a snapshot
//! copies only that object.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use imbl::OrdMap;
use sha2::{Digest, Sha256};

/// Identifier of a heap object. Zero is the null object; ids at or above
/// [`ObjId::CODE_BASE`] name code, not memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ObjId(pub u32);

impl ObjId {
    pub const NULL: ObjId = ObjId(0);
    pub const CODE_BASE: u32 = 0x8000_0000;

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn is_code(self) -> bool {
        self.0 >= Self::CODE_BASE
    }
}

impl fmt::Display for ObjId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obj{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PtrVal {
    pub obj: ObjId,
    pub offset: u32,
}

impl PtrVal {
    pub const NULL: PtrVal = PtrVal { obj: ObjId::NULL, offset: 0 };

    pub fn new(obj: ObjId, offset: u32) -> Self {
        PtrVal { obj, offset }
    }

    pub fn is_null(&self) -> bool {
        self.obj.is_null()
    }

    pub fn with_offset(self, offset: u32) -> Self {
        PtrVal { offset, ..self }
    }

    fn encode(self) -> u64 {
        (u64::from(self.obj.0) << 32) | u64::from(self.offset)
    }

    fn decode(word: u64) -> Self {
        PtrVal { obj: ObjId((word >> 32) as u32), offset: word as u32 }
    }
}

/// A value moved between registers and memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    Int(i64),
    Ptr(PtrVal),
}

impl Value {
    pub fn as_int(self) -> i64 {
        match self {
            Value::Int(v) => v,
            Value::Ptr(p) => p.encode() as i64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, thiserror::Error)]
pub enum MemFault {
    #[error("null-deref")]
    NullDeref,
    #[error("use-after-free")]
    UseAfterFree,
    #[error("out-of-bounds")]
    OutOfBounds,
    #[error("misaligned-pointer-read")]
    MisalignedPointerRead,
    #[error("misaligned-pointer-write")]
    MisalignedPointerWrite,
    #[error("invalid-free")]
    InvalidFree,
    /// Access through a pointer that never named a heap object.
    #[error("invalid-pointer")]
    InvalidPointer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeapObject {
    bytes: Vec<u8>,
    ptrs: BTreeSet<u32>,
}

impl HeapObject {
    fn new(size: u32) -> Self {
        HeapObject { bytes: vec![0; size as usize], ptrs: BTreeSet::new() }
    }

    pub fn size(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Offsets of words currently holding pointers, ascending.
    pub fn pointer_offsets(&self) -> impl Iterator<Item = u32> + '_ {
        self.ptrs.iter().copied()
    }

    pub fn is_pointer(&self, offset: u32) -> bool {
        self.ptrs.contains(&offset)
    }

    /// The pointer stored at a pointer-mapped word.
    pub fn pointer_at(&self, offset: u32) -> Option<PtrVal> {
        self.ptrs.contains(&offset).then(|| PtrVal::decode(self.word(offset)))
    }

    /// Signed little-endian integer of `width` bytes at `offset`; the caller
    /// guarantees bounds.
    pub fn int_at(&self, offset: u32, width: u32) -> i64 {
        let o = offset as usize;
        match width {
            1 => i64::from(self.bytes[o] as i8),
            4 => i64::from(i32::from_le_bytes(self.bytes[o..o + 4].try_into().unwrap())),
            _ => self.word(offset) as i64,
        }
    }

    fn word(&self, offset: u32) -> u64 {
        let o = offset as usize;
        u64::from_le_bytes(self.bytes[o..o + 8].try_into().unwrap())
    }

    fn overlapping_ptrs(&self, offset: u32, width: u32) -> impl Iterator<Item = u32> + '_ {
        let lo = offset.saturating_sub(7);
        let hi = offset + width;
        self.ptrs.range(lo..hi).copied().filter(move |&w| w + 8 > offset)
    }
}

/// Digest of the canonical serialization of a snapshot (SHA-256).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateDigest(pub [u8; 32]);

impl StateDigest {
    /// First 12 hex digits, for display.
    pub fn short(&self) -> String {
        self.to_string()[..12].to_string()
    }
}

impl fmt::Display for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateDigest({})", self.short())
    }
}

type ObjectMap = OrdMap<ObjId, Arc<HeapObject>>;

/// The mutable working heap.
#[derive(Clone, Debug)]
pub struct HeapState {
    objects: ObjectMap,
    next_id: u32,
}

impl Default for HeapState {
    fn default() -> Self {
        Self::new()
    }
}

impl HeapState {
    pub fn new() -> Self {
        HeapState { objects: OrdMap::new(), next_id: 1 }
    }

    pub fn alloc(&mut self, size: u32) -> PtrVal {
        let id = ObjId(self.next_id);
        assert!(!id.is_code(), "object id space exhausted");
        self.next_id += 1;
        self.objects.insert(id, Arc::new(HeapObject::new(size)));
        PtrVal::new(id, 0)
    }

    pub fn free(&mut self, p: PtrVal) -> Result<(), MemFault> {
        if p.is_null() || p.offset != 0 || !self.objects.contains_key(&p.obj) {
            return Err(MemFault::InvalidFree);
        }
        self.objects.remove(&p.obj);
        Ok(())
    }

    pub fn is_live(&self, id: ObjId) -> bool {
        self.objects.contains_key(&id)
    }

    /// Allocated at some point and since freed. Ids are never reused.
    pub fn is_freed(&self, id: ObjId) -> bool {
        !id.is_null() && !id.is_code() && id.0 < self.next_id && !self.is_live(id)
    }

    pub fn object(&self, id: ObjId) -> Option<&HeapObject> {
        self.objects.get(&id).map(|o| o.as_ref())
    }

    pub fn live_count(&self) -> usize {
        self.objects.len()
    }

    pub fn live_ids(&self) -> impl Iterator<Item = ObjId> + '_ {
        self.objects.keys().copied()
    }

    fn check(&self, p: PtrVal, width: u32) -> Result<&HeapObject, MemFault> {
        if p.is_null() {
            return Err(MemFault::NullDeref);
        }
        if p.obj.is_code() {
            return Err(MemFault::InvalidPointer);
        }
        let obj = match self.objects.get(&p.obj) {
            Some(o) => o,
            None if p.obj.0 < self.next_id => return Err(MemFault::UseAfterFree),
            None => return Err(MemFault::InvalidPointer),
        };
        if u64::from(p.offset) + u64::from(width) > u64::from(obj.size()) {
            return Err(MemFault::OutOfBounds);
        }
        Ok(obj)
    }

    pub fn load(&self, p: PtrVal, width: u32) -> Result<Value, MemFault> {
        debug_assert!(matches!(width, 1 | 4 | 8));
        let obj = self.check(p, width)?;
        if width == 8 {
            if let Some(ptr) = obj.pointer_at(p.offset) {
                return Ok(Value::Ptr(ptr));
            }
            if obj.overlapping_ptrs(p.offset, 8).next().is_some() {
                return Err(MemFault::MisalignedPointerRead);
            }
        }
        Ok(Value::Int(obj.int_at(p.offset, width)))
    }

    pub fn store(&mut self, p: PtrVal, width: u32, v: Value) -> Result<(), MemFault> {
        debug_assert!(matches!(width, 1 | 4 | 8));
        self.check(p, width)?;
        if matches!(v, Value::Ptr(_)) && (width != 8 || p.offset % 8 != 0) {
            return Err(MemFault::MisalignedPointerWrite);
        }
        let obj = Arc::make_mut(self.objects.get_mut(&p.obj).expect("checked live"));
        let o = p.offset as usize;
        let stale: Vec<u32> = obj.overlapping_ptrs(p.offset, width).collect();
        for w in stale {
            obj.ptrs.remove(&w);
        }
        match v {
            Value::Ptr(ptr) => {
                obj.bytes[o..o + 8].copy_from_slice(&ptr.encode().to_le_bytes());
                obj.ptrs.insert(p.offset);
            }
            Value::Int(x) => {
                obj.bytes[o..o + width as usize].copy_from_slice(&x.to_le_bytes()[..width as usize]);
            }
        }
        Ok(())
    }

    /// Captures the current contents. Costs O(1) here; later writes copy the
    /// objects they touch.
    pub fn snapshot(&self, root: PtrVal) -> SnapshotRef {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        SnapshotRef(Arc::new(Snapshot {
            id: NEXT.fetch_add(1, Ordering::Relaxed),
            root,
            objects: self.objects.clone(),
            next_id: self.next_id,
        }))
    }

    pub fn restore(s: &SnapshotRef) -> HeapState {
        HeapState { objects: s.0.objects.clone(), next_id: s.0.next_id }
    }
}

#[derive(Debug)]
struct Snapshot {
    id: u64,
    root: PtrVal,
    objects: ObjectMap,
    next_id: u32,
}

/// An immutable heap version. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct SnapshotRef(Arc<Snapshot>);

/// Canonical id used for pointers into code.
const CANON_CODE_TAG: u64 = 1 << 63;
/// Canonical id used for pointers to objects that are not live.
const CANON_DANGLING: u64 = u64::MAX;

impl SnapshotRef {
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn root(&self) -> PtrVal {
        self.0.root
    }

    pub fn object(&self, id: ObjId) -> Option<&HeapObject> {
        self.0.objects.get(&id).map(|o| o.as_ref())
    }

    pub fn is_live(&self, id: ObjId) -> bool {
        self.0.objects.contains_key(&id)
    }

    pub fn is_freed(&self, id: ObjId) -> bool {
        !id.is_null() && !id.is_code() && id.0 < self.0.next_id && !self.is_live(id)
    }

    pub fn live_count(&self) -> usize {
        self.0.objects.len()
    }

    pub fn load(&self, p: PtrVal, width: u32) -> Result<Value, MemFault> {
        HeapState::restore(self).load(p, width)
    }

    /// Identities of the object versions held by this snapshot.
    pub fn versions(&self) -> impl Iterator<Item = *const HeapObject> + '_ {
        self.0.objects.values().map(Arc::as_ptr)
    }

    /// Objects reachable from the root, in canonical discovery order:
    /// depth-first, pointer words visited by ascending offset.
    pub fn canonical_order(&self) -> Vec<ObjId> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.0.root.obj];
        while let Some(id) = stack.pop() {
            let Some(obj) = self.object(id) else { continue };
            if !seen.insert(id) {
                continue;
            }
            order.push(id);
            let targets: Vec<ObjId> = obj.pointer_offsets().map(|o| obj.pointer_at(o).unwrap().obj).collect();
            stack.extend(targets.into_iter().rev());
        }
        order
    }

    /// Canonical ids (1-based discovery order) of reachable objects.
    pub fn canonical_ids(&self) -> HashMap<ObjId, u64> {
        self.canonical_order().into_iter().enumerate().map(|(i, id)| (id, i as u64 + 1)).collect()
    }

    /// Hash of the canonical serialization; see `docs/state-digest.md`.
    pub fn canonical_digest(&self) -> StateDigest {
        let order = self.canonical_order();
        let canon: HashMap<ObjId, u64> = order.iter().enumerate().map(|(i, id)| (*id, i as u64 + 1)).collect();
        let canon_ptr = |p: PtrVal| -> (u64, u64) {
            let id = if p.is_null() {
                0
            } else if p.obj.is_code() {
                CANON_CODE_TAG | u64::from(p.obj.0)
            } else {
                canon.get(&p.obj).copied().unwrap_or(CANON_DANGLING)
            };
            (id, u64::from(p.offset))
        };
        let mut h = Sha256::new();
        h.update((order.len() as u64).to_le_bytes());
        h.update(canon_ptr(self.0.root).1.to_le_bytes());
        for id in &order {
            let obj = self.object(*id).unwrap();
            h.update(canon[id].to_le_bytes());
            h.update(u64::from(obj.size()).to_le_bytes());
            let mut bytes = obj.bytes.clone();
            for off in obj.pointer_offsets() {
                bytes[off as usize..off as usize + 8].fill(0);
            }
            h.update(&bytes);
            h.update((obj.ptrs.len() as u64).to_le_bytes());
            for off in obj.pointer_offsets() {
                let (cid, coff) = canon_ptr(obj.pointer_at(off).unwrap());
                h.update(u64::from(off).to_le_bytes());
                h.update(cid.to_le_bytes());
                h.update(coff.to_le_bytes());
            }
        }
        StateDigest(h.finalize().into())
    }
}

/// Number of distinct object versions retained by a set of snapshots.
pub fn distinct_versions<'a>(snaps: impl IntoIterator<Item = &'a SnapshotRef>) -> usize {
    let mut set = std::collections::HashSet::new();
    for s in snaps {
        set.extend(s.versions());
    }
    set.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(obj: PtrVal, off: u32) -> PtrVal {
        obj.with_offset(off)
    }

    #[test]
    fn alloc_basics() {
        let mut h = HeapState::new();
        let a = h.alloc(8);
        let b = h.alloc(8);
        assert_eq!(a.offset, 0);
        assert_ne!(a.obj, b.obj);
        assert_eq!(h.load(a, 8), Ok(Value::Int(0)));
        let z = h.alloc(0);
        assert_eq!(h.load(z, 1), Err(MemFault::OutOfBounds));
        assert_eq!(h.store(z, 1, Value::Int(1)), Err(MemFault::OutOfBounds));
    }

    #[test]
    fn free_rules() {
        let mut h = HeapState::new();
        let a = h.alloc(8);
        assert_eq!(h.free(a), Ok(()));
        assert_eq!(h.load(a, 4), Err(MemFault::UseAfterFree));
        assert_eq!(h.free(a), Err(MemFault::InvalidFree));
        assert_eq!(h.free(PtrVal::NULL), Err(MemFault::InvalidFree));
        let b = h.alloc(8);
        assert_eq!(h.free(p(b, 4)), Err(MemFault::InvalidFree));
        assert!(b.obj.0 > a.obj.0, "ids are not reused");
    }

    #[test]
    fn load_store_rules() {
        let mut h = HeapState::new();
        let a = h.alloc(8);
        h.store(a, 4, Value::Int(7)).unwrap();
        assert_eq!(h.load(a, 4), Ok(Value::Int(7)));
        assert_eq!(h.load(p(a, 6), 4), Err(MemFault::OutOfBounds));
        assert_eq!(h.load(PtrVal::NULL, 4), Err(MemFault::NullDeref));

        let q = h.alloc(16);
        h.store(a, 8, Value::Ptr(p(q, 8))).unwrap();
        assert_eq!(h.load(a, 8), Ok(Value::Ptr(p(q, 8))));

        h.store(a, 8, Value::Int(3)).unwrap();
        assert_eq!(h.load(a, 8), Ok(Value::Int(3)));

        h.store(a, 8, Value::Ptr(q)).unwrap();
        h.store(p(a, 3), 1, Value::Int(1)).unwrap();
        assert!(!h.object(a.obj).unwrap().is_pointer(0));
        assert!(matches!(h.load(a, 8), Ok(Value::Int(_))));
    }

    #[test]
    fn misaligned_pointer_access() {
        let mut h = HeapState::new();
        let a = h.alloc(24);
        let q = h.alloc(1);
        assert_eq!(h.store(p(a, 4), 8, Value::Ptr(q)), Err(MemFault::MisalignedPointerWrite));
        h.store(p(a, 8), 8, Value::Ptr(q)).unwrap();
        assert_eq!(h.load(p(a, 4), 8), Err(MemFault::MisalignedPointerRead));
        assert_eq!(h.load(p(a, 12), 8), Err(MemFault::MisalignedPointerRead));
        // Narrow reads see the raw encoding.
        assert!(h.load(p(a, 8), 4).is_ok());
    }

    #[test]
    fn failed_store_leaves_bytes_unchanged() {
        let mut h = HeapState::new();
        let a = h.alloc(8);
        h.store(a, 8, Value::Int(0x0102_0304_0506_0708)).unwrap();
        let before = h.object(a.obj).unwrap().clone();
        assert_eq!(h.store(p(a, 8), 1, Value::Int(9)), Err(MemFault::OutOfBounds));
        assert_eq!(h.store(p(a, 5), 4, Value::Int(9)), Err(MemFault::OutOfBounds));
        assert_eq!(h.object(a.obj).unwrap(), &before);
    }

    #[test]
    fn snapshot_is_immutable() {
        let mut h = HeapState::new();
        let root = h.alloc(16);
        let child = h.alloc(8);
        h.store(root, 8, Value::Ptr(child)).unwrap();
        let s = h.snapshot(root);
        let d = s.canonical_digest();
        h.store(child, 4, Value::Int(99)).unwrap();
        h.free(child).unwrap();
        assert_eq!(s.canonical_digest(), d);
        assert_eq!(s.load(child, 4), Ok(Value::Int(0)));
    }

    #[test]
    fn back_to_back_snapshots_share_everything() {
        let mut h = HeapState::new();
        let root = h.alloc(8);
        for _ in 0..5 {
            h.alloc(8);
        }
        let s1 = h.snapshot(root);
        let s2 = h.snapshot(root);
        assert_eq!(distinct_versions([&s1]), distinct_versions([&s1, &s2]));
    }

    #[test]
    fn mutating_k_objects_creates_k_versions() {
        let mut h = HeapState::new();
        let objs: Vec<PtrVal> = (0..10).map(|_| h.alloc(8)).collect();
        let s1 = h.snapshot(objs[0]);
        for o in &objs[..3] {
            h.store(*o, 4, Value::Int(1)).unwrap();
            h.store(*o, 4, Value::Int(2)).unwrap();
        }
        let s2 = h.snapshot(objs[0]);
        assert_eq!(distinct_versions([&s1, &s2]), 13);
    }

    #[test]
    fn restore_round_trip() {
        let mut h = HeapState::new();
        let root = h.alloc(16);
        let c = h.alloc(8);
        h.store(root, 8, Value::Ptr(c)).unwrap();
        let s = h.snapshot(root);

        let mut r = HeapState::restore(&s);
        assert_eq!(r.snapshot(root).canonical_digest(), s.canonical_digest());
        r.store(c, 4, Value::Int(5)).unwrap();
        let r2 = HeapState::restore(&s);
        assert_eq!(r2.load(c, 4), Ok(Value::Int(0)));

        let mut r3 = HeapState::restore(&s);
        let fresh = r3.alloc(4);
        assert!(!s.is_live(fresh.obj) && !s.is_freed(fresh.obj));
        assert!(fresh.obj.0 > c.obj.0);
    }

    #[test]
    fn digest_ignores_unreachable_and_sees_data() {
        let mut h = HeapState::new();
        let root = h.alloc(16);
        let c = h.alloc(8);
        h.store(root, 8, Value::Ptr(c)).unwrap();
        let d = h.snapshot(root).canonical_digest();
        h.alloc(32);
        assert_eq!(h.snapshot(root).canonical_digest(), d);
        h.store(c, 1, Value::Int(1)).unwrap();
        assert_ne!(h.snapshot(root).canonical_digest(), d);
    }

    /// Builds root -> [a, b], a -> b, in either allocation order.
    fn shape(reverse: bool) -> StateDigest {
        let mut h = HeapState::new();
        if reverse {
            h.alloc(3); // shifts every id
        }
        let (root, a, b) = if reverse {
            let b = h.alloc(4);
            let a = h.alloc(8);
            (h.alloc(16), a, b)
        } else {
            let root = h.alloc(16);
            let a = h.alloc(8);
            (root, a, h.alloc(4))
        };
        h.store(root, 8, Value::Ptr(a)).unwrap();
        h.store(p(root, 8), 8, Value::Ptr(b)).unwrap();
        h.store(a, 8, Value::Ptr(p(b, 2))).unwrap();
        h.store(b, 4, Value::Int(-9)).unwrap();
        h.snapshot(root).canonical_digest()
    }

    #[test]
    fn digest_independent_of_allocation_order() {
        assert_eq!(shape(false), shape(true));
    }

    #[derive(Clone, Debug)]
    enum HeapOp {
        StoreInt { obj: usize, off: u32, width: u32, v: i64 },
        StorePtr { obj: usize, word: u32, target: usize },
        Load { obj: usize, off: u32, width: u32 },
    }

    fn heap_op() -> impl Strategy<Value = HeapOp> {
        let width = prop_oneof![Just(1u32), Just(4u32), Just(8u32)];
        prop_oneof![
            (0..4usize, 0..40u32, width.clone(), any::<i64>())
                .prop_map(|(obj, off, width, v)| HeapOp::StoreInt { obj, off, width, v }),
            (0..4usize, 0..5u32, 0..4usize).prop_map(|(obj, word, target)| HeapOp::StorePtr { obj, word, target }),
            (0..4usize, 0..40u32, width).prop_map(|(obj, off, width)| HeapOp::Load { obj, off, width }),
        ]
    }

    proptest! {
        // A width-8 load returns a pointer iff the last full-width write to
        // that word was a pointer store and no later write overlapped it.
        #[test]
        fn pointer_map_soundness(ops in proptest::collection::vec(heap_op(), 1..80)) {
            let mut h = HeapState::new();
            let objs: Vec<PtrVal> = (0..4).map(|_| h.alloc(32)).collect();
            // model: per object, word offset -> pointer
            let mut model: Vec<HashMap<u32, PtrVal>> = vec![HashMap::new(); 4];
            for op in ops {
                match op {
                    HeapOp::StoreInt { obj, off, width, v } => {
                        let r = h.store(p(objs[obj], off), width, Value::Int(v));
                        if off + width > 32 {
                            prop_assert_eq!(r, Err(MemFault::OutOfBounds));
                        } else {
                            prop_assert!(r.is_ok());
                            model[obj].retain(|w, _| !(*w < off + width && w + 8 > off));
                        }
                    }
                    HeapOp::StorePtr { obj, word, target } => {
                        let off = word * 8;
                        let val = p(objs[target], word);
                        let r = h.store(p(objs[obj], off), 8, Value::Ptr(val));
                        if off + 8 > 32 {
                            prop_assert_eq!(r, Err(MemFault::OutOfBounds));
                        } else {
                            prop_assert!(r.is_ok());
                            model[obj].insert(off, val);
                        }
                    }
                    HeapOp::Load { obj, off, width } => {
                        let r = h.load(p(objs[obj], off), width);
                        if off + width > 32 {
                            prop_assert_eq!(r, Err(MemFault::OutOfBounds));
                            continue;
                        }
                        let partial = model[obj].keys().any(|w| *w != off && *w < off + 8 && w + 8 > off);
                        match (width, model[obj].get(&off)) {
                            (8, Some(ptr)) => prop_assert_eq!(r, Ok(Value::Ptr(*ptr))),
                            (8, None) if partial => prop_assert_eq!(r, Err(MemFault::MisalignedPointerRead)),
                            _ => prop_assert!(matches!(r, Ok(Value::Int(_)))),
                        }
                    }
                }
            }
            for (i, o) in objs.iter().enumerate() {
                let mut actual: Vec<u32> = h.object(o.obj).unwrap().pointer_offsets().collect();
                let mut expected: Vec<u32> = model[i].keys().copied().collect();
                actual.sort();
                expected.sort();
                prop_assert_eq!(actual, expected);
            }
        }

        // Random graphs built with shuffled allocation order digest equally.
        #[test]
        fn digest_canonical_under_permutation(
            n in 1..8usize,
            edges in proptest::collection::vec((0..8usize, 0..3u32, 0..8usize), 0..20),
            data in proptest::collection::vec(any::<i32>(), 8),
            perm_seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let build = |order: &[usize]| {
                let mut h = HeapState::new();
                let mut ptrs = vec![PtrVal::NULL; n];
                for &i in order {
                    ptrs[i] = h.alloc(32);
                }
                for i in 0..n {
                    h.store(p(ptrs[i], 24), 4, Value::Int(data[i] as i64)).unwrap();
                }
                for &(from, word, to) in &edges {
                    if from < n && to < n {
                        h.store(p(ptrs[from], word * 8), 8, Value::Ptr(ptrs[to])).unwrap();
                    }
                }
                h.snapshot(ptrs[0]).canonical_digest()
            };
            let identity: Vec<usize> = (0..n).collect();
            let mut shuffled = identity.clone();
            shuffled.shuffle(&mut rand::rngs::StdRng::seed_from_u64(perm_seed));
            prop_assert_eq!(build(&identity), build(&shuffled));
        }

        // Snapshots stay digest-stable under arbitrary later mutation.
        #[test]
        fn snapshot_persistence(ops in proptest::collection::vec(heap_op(), 1..40)) {
            let mut h = HeapState::new();
            let objs: Vec<PtrVal> = (0..4).map(|_| h.alloc(32)).collect();
            for i in 0..3 {
                h.store(p(objs[i], 0), 8, Value::Ptr(objs[i + 1])).unwrap();
            }
            let s = h.snapshot(objs[0]);
            let d = s.canonical_digest();
            for op in ops {
                match op {
                    HeapOp::StoreInt { obj, off, width, v } => { let _ = h.store(p(objs[obj], off), width, Value::Int(v)); }
                    HeapOp::StorePtr { obj, word, target } => { let _ = h.store(p(objs[obj], word * 8), 8, Value::Ptr(objs[target])); }
                    HeapOp::Load { obj, .. } => { let _ = h.free(objs[obj]); }
                }
            }
            prop_assert_eq!(s.canonical_digest(), d);
        }
    }
}
