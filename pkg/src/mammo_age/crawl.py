"""Thumbnail crawler for DDSM-style case pages.

A case page lists thumbnail ``<img>`` tags whose file names carry the record
key (``<case_id>.<SIDE>_<VIEW>...``) and a ``PATIENT_AGE <n>`` line, as in the
DDSM ``.ics`` overview files. The status is taken from the page URL path
(``.../cancers/...``, ``.../normals/...``). Pages can come from a live site or
from a local mirror directory of recorded ``.html`` files.
"""
from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Optional
from urllib.parse import urljoin, urlparse

from .dataset import Status
from .errors import ParseError

log = logging.getLogger(__name__)

_THUMB_RE = re.compile(
    r"(?P<case_id>[A-Za-z0-9_\-]+)\.(?P<side>LEFT|RIGHT)_(?P<view>CC|MLO)[^/]*?(?P<ext>\.(?:gif|png|jpe?g))$",
    re.IGNORECASE,
)
_AGE_RE = re.compile(r"PATIENT_AGE\s+(\S+)")


@dataclass
class CrawlOptions:
    local_mirror: Optional[Path] = None
    delay: float = 0.5
    retries: int = 3
    backoff: float = 1.0
    timeout: float = 30.0
    max_pages: Optional[int] = None
    max_images_per_page: int = 4
    user_agent: str = "mammo-age-crawler/0.1"


@dataclass
class CrawlReport:
    pages_fetched: int = 0
    images_saved: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    elapsed: float = 0.0
    images_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "pages_fetched": self.pages_fetched,
            "images_saved": self.images_saved,
            "images_skipped": self.images_skipped,
            "failures": [{"url": u, "reason": r} for u, r in self.failures],
            "elapsed": round(self.elapsed, 3),
        }


class _PageParser(HTMLParser):
    def __init__(self):
        super().__init__()
        self.images: list[str] = []
        self.links: list[str] = []
        self.text: list[str] = []

    def handle_starttag(self, tag, attrs):
        a = dict(attrs)
        if tag == "img" and a.get("src"):
            self.images.append(a["src"])
        elif tag == "a" and a.get("href"):
            self.links.append(a["href"])

    def handle_data(self, data):
        self.text.append(data)


@dataclass
class CasePage:
    url: str
    status: Optional[Status]
    age: Optional[str]
    thumbnails: list[tuple[str, str]]  # (absolute url, canonical file name)
    links: list[str]


def parse_case_page(url: str, html: str) -> CasePage:
    """Extract thumbnails, age, status and outgoing links from one page."""
    p = _PageParser()
    p.feed(html)
    p.close()
    thumbs = []
    for src in p.images:
        name = Path(urlparse(src).path).name
        m = _THUMB_RE.search(name)
        if m is None:
            continue  # logos, icons
        canon = f"{m['case_id']}.{m['side'].upper()}_{m['view'].upper()}{m['ext'].lower()}"
        thumbs.append((urljoin(url, src), canon))
    m = _AGE_RE.search("".join(p.text))
    status = None
    for seg in urlparse(url).path.split("/"):
        try:
            status = Status.parse(seg)
        except ParseError:
            continue
    links = [urljoin(url, h).split("#")[0] for h in p.links]
    return CasePage(url, status, m.group(1) if m else None, thumbs, links)


class _Fetcher:
    """Retrying fetcher; applies the politeness delay between live requests."""

    def __init__(self, options: CrawlOptions):
        self.options = options
        self._last = 0.0
        self._session = None

    def get(self, url: str) -> bytes:
        if url.startswith("file://"):
            path = Path(urlparse(url).path)
            if not path.exists():
                raise FileNotFoundError(url)
            return path.read_bytes()
        import requests

        if self._session is None:
            self._session = requests.Session()
            self._session.headers["User-Agent"] = self.options.user_agent
        last_exc: Exception = RuntimeError("no attempt made")
        for attempt in range(self.options.retries + 1):
            wait = self._last + self.options.delay - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            try:
                r = self._session.get(url, timeout=self.options.timeout)
            except requests.RequestException as exc:
                last_exc = exc
            else:
                if r.status_code == 404:
                    raise FileNotFoundError(url)
                if r.status_code < 500:
                    r.raise_for_status()
                    return r.content
                last_exc = requests.HTTPError(f"HTTP {r.status_code}")
            finally:
                self._last = time.monotonic()
            if attempt < self.options.retries:
                time.sleep(self.options.backoff * 2**attempt)
        raise last_exc


def _save(page: CasePage, fetcher: _Fetcher, out_dir: Path, report: CrawlReport) -> None:
    thumbs = page.thumbnails
    if len(thumbs) > fetcher.options.max_images_per_page:
        log.warning("%s: %d thumbnails, keeping first %d", page.url, len(thumbs),
                    fetcher.options.max_images_per_page)
        thumbs = thumbs[: fetcher.options.max_images_per_page]
    folder = out_dir / page.status.label
    for url, name in thumbs:
        target = folder / name
        sidecar = target.with_name(name + ".json")
        if target.exists():
            report.images_skipped += 1
            continue
        try:
            data = fetcher.get(url)
        except FileNotFoundError:
            report.failures.append((url, "not found"))
            continue
        except Exception as exc:  # network errors after retries
            report.failures.append((url, f"fetch failed: {exc}"))
            continue
        folder.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(name + ".part")
        tmp.write_bytes(data)
        tmp.replace(target)
        meta = {"age": page.age, "status": page.status.value, "filename": name, "source": url}
        sidecar.write_text(json.dumps(meta, sort_keys=True) + "\n")
        report.images_saved += 1


def _handle_page(url, html, fetcher, out_dir, report) -> Optional[CasePage]:
    try:
        page = parse_case_page(url, html)
    except Exception as exc:
        report.failures.append((url, f"parse error: {exc}"))
        return None
    if page.thumbnails:
        if page.status is None:
            report.failures.append((url, "parse error: no status in page path"))
        else:
            _save(page, fetcher, out_dir, report)
    return page


def crawl(base_url: Optional[str], out_dir, options: Optional[CrawlOptions] = None) -> CrawlReport:
    """Download thumbnails and sidecar metadata into ``out_dir/<Status>/``.

    With ``options.local_mirror`` set, every ``*.html`` file below the mirror
    directory is treated as one recorded page and no network access happens.
    Otherwise pages are fetched breadth-first from ``base_url``, following only
    links below it. Re-runs skip files that already exist.
    """
    options = options or CrawlOptions()
    out_dir = Path(out_dir)
    report = CrawlReport()
    t0 = time.monotonic()
    fetcher = _Fetcher(options)

    if options.local_mirror is not None:
        mirror = Path(options.local_mirror).resolve()
        pages = sorted(mirror.rglob("*.html"))
        if options.max_pages is not None:
            pages = pages[: options.max_pages]
        for path in pages:
            try:
                html = path.read_text(encoding="utf-8", errors="replace")
            except OSError as exc:
                report.failures.append((path.as_uri(), f"read error: {exc}"))
                continue
            report.pages_fetched += 1
            _handle_page(path.as_uri(), html, fetcher, out_dir, report)
    else:
        if not base_url:
            raise ValueError("either base_url or options.local_mirror is required")
        prefix = base_url if base_url.endswith("/") else base_url.rsplit("/", 1)[0] + "/"
        queue, seen = [base_url], {base_url}
        while queue:
            if options.max_pages is not None and report.pages_fetched >= options.max_pages:
                break
            url = queue.pop(0)
            try:
                html = fetcher.get(url).decode("utf-8", errors="replace")
            except FileNotFoundError:
                report.failures.append((url, "not found"))
                continue
            except Exception as exc:
                report.failures.append((url, f"fetch failed: {exc}"))
                continue
            report.pages_fetched += 1
            page = _handle_page(url, html, fetcher, out_dir, report)
            if page is None:
                continue
            for link in page.links:
                if link.startswith(prefix) and link not in seen and not _THUMB_RE.search(link):
                    seen.add(link)
                    queue.append(link)

    report.elapsed = time.monotonic() - t0
    log.info("crawl: %d pages, %d images saved, %d skipped, %d failures",
             report.pages_fetched, report.images_saved, report.images_skipped, len(report.failures))
    return report
