# utils/utils.py
# 该模块包含一些通用的工具函数：随机种子派生、哈希、原子写入、名称纠错建议
import hashlib
import json
import logging
import os
import tempfile
import unicodedata

from rapidfuzz import fuzz


def derive_seed(seed: int, *names) -> int:
    """
    从全局种子和一组阶段名派生出独立的子种子。
    同样的 (seed, names) 永远得到同样的结果，因此每个阶段都能单独重跑。
    """
    text = ":".join([str(int(seed)), *(str(n) for n in names)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def hash_config(data) -> str:
    """配置的 SHA-256 (基于规范化 JSON)，写入 manifest 用于复现。"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """先写临时文件再 rename，保证读者永远看不到写了一半的文件。"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def get_close_matches_with_ratio(query, candidates, limit=3, threshold=0.6):
    """Finds close matches, giving a strong boost to prefix matches."""
    if not query or not candidates:
        return []

    scored_candidates = []
    norm_query = unicodedata.normalize("NFKC", query).lower()

    for cand in candidates:
        norm_cand = unicodedata.normalize("NFKC", cand).lower()
        ratio = fuzz.ratio(norm_query, norm_cand) / 100.0
        if norm_query.startswith(norm_cand) or norm_cand.startswith(norm_query):
            ratio = max(ratio, 0.9)
        if ratio >= threshold:
            scored_candidates.append((cand, ratio))

    scored_candidates.sort(key=lambda x: x[1], reverse=True)
    logging.debug(f"🔍 '{query}' 的候选匹配: {scored_candidates[:limit]}")
    return [cand for cand, _ in scored_candidates[:limit]]
