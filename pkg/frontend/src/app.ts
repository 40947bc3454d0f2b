/** DOM wiring for the editing loop. All geometry/API/history logic lives in
 * the tested modules; this file only connects them to elements. */

import { createClient, fetchArtifactText, pollJob, submitJob, ValidationError } from "./api.js";
import type { ApiClient } from "./api.js";
import { beginDrag, endDrag, isRejected, toPixels, updateDrag } from "./bbox.js";
import type { DragState } from "./bbox.js";
import { artifactUrlsFor, HistoryStore } from "./history.js";
import { parseLossLog, sparklinePath } from "./losscurve.js";
import { createMockFetch } from "./mockService.js";
import type { EditRequestFields, NormalizedBox } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const params = new URLSearchParams(location.search);
const useMock = params.get("mock") === "1";
const baseUrl = params.get("api") ?? "";
const client: ApiClient = createClient(baseUrl, useMock ? createMockFetch() : undefined);

const history = new HistoryStore();

const canvas = el<HTMLCanvasElement>("annotate-canvas");
const ctx = canvas.getContext("2d")!;
const fileInput = el<HTMLInputElement>("image-file");
const invPrompt = el<HTMLInputElement>("inv-prompt");
const editPrompt = el<HTMLInputElement>("edit-prompt");
const objectWord = el<HTMLInputElement>("object-word");
const submitBtn = el<HTMLButtonElement>("submit-btn");
const statusLine = el<HTMLDivElement>("status-line");
const banner = el<HTMLDivElement>("banner");
const hint = el<HTMLDivElement>("bbox-hint");
const resultInput = el<HTMLImageElement>("result-input");
const resultEdited = el<HTMLImageElement>("result-edited");
const overlayImg = el<HTMLImageElement>("result-overlay");
const overlaySelect = el<HTMLSelectElement>("overlay-select");
const overlayOpacity = el<HTMLInputElement>("overlay-opacity");
const sparkline = el<HTMLElement>("sparkline-path");
const historyList = el<HTMLUListElement>("history-list");

let image: HTMLImageElement | null = null;
let imageBlob: Blob | null = null;
let box: NormalizedBox | null = null;
let drag: DragState | null = null;

function display() {
  return { width: canvas.width, height: canvas.height };
}

function redraw(preview: NormalizedBox | null = null) {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (image) ctx.drawImage(image, 0, 0, canvas.width, canvas.height);
  const active = preview ?? box;
  if (!active) return;
  const px = toPixels(active, display());
  ctx.strokeStyle = "#16c79a";
  ctx.lineWidth = 2;
  ctx.strokeRect(px.left, px.top, px.width, px.height);
  ctx.fillStyle = "#16c79a";
  for (const [cx, cy] of [
    [px.left, px.top], [px.left + px.width, px.top],
    [px.left, px.top + px.height], [px.left + px.width, px.top + px.height],
  ]) {
    ctx.fillRect(cx - 4, cy - 4, 8, 8);
  }
}

function canvasPoint(ev: PointerEvent): [number, number] {
  const rect = canvas.getBoundingClientRect();
  return [
    ((ev.clientX - rect.left) / rect.width) * canvas.width,
    ((ev.clientY - rect.top) / rect.height) * canvas.height,
  ];
}

canvas.addEventListener("pointerdown", (ev) => {
  if (!image) return;
  const [x, y] = canvasPoint(ev);
  drag = beginDrag(x, y, box, display());
  canvas.setPointerCapture(ev.pointerId);
});

canvas.addEventListener("pointermove", (ev) => {
  if (!drag) return;
  const [x, y] = canvasPoint(ev);
  redraw(updateDrag(drag, x, y, display()));
});

canvas.addEventListener("pointerup", (ev) => {
  if (!drag) return;
  const [x, y] = canvasPoint(ev);
  const result = endDrag(drag, x, y, display());
  drag = null;
  if (isRejected(result)) {
    hint.textContent = result.error;
    redraw();
    return;
  }
  hint.textContent = "";
  box = result;
  redraw();
});

fileInput.addEventListener("change", () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  imageBlob = file;
  const img = new Image();
  img.onload = () => {
    image = img;
    box = null;
    redraw();
  };
  img.src = URL.createObjectURL(file);
});

function setStatus(text: string) {
  statusLine.textContent = text;
}

function renderEntry(entry: ReturnType<HistoryStore["active"]>) {
  if (!entry) return;
  const urls = artifactUrlsFor(entry, client);
  resultInput.src = entry.inputUrl ?? urls["input.png"] ?? "";
  resultEdited.src = urls["edited.png"] ?? "";
  const overlayName = overlaySelect.value;
  overlayImg.src = urls[overlayName] ?? "";
  overlayImg.style.opacity = overlayOpacity.value;
  setStatus(entry.state === "failed" ? `failed: ${entry.errorText}` : `job ${entry.jobId}: ${entry.state}`);
  banner.textContent = entry.state === "failed" ? entry.errorText ?? "job failed" : "";
  banner.className = entry.state === "failed" ? "banner error" : "banner";
  if (entry.state === "done" && urls["loss_log.csv"]) {
    fetchArtifactText(client, entry.jobId, "loss_log.csv")
      .then((csv) => {
        const rows = parseLossLog(csv);
        sparkline.setAttribute("d", sparklinePath(rows.map((r) => r.lTotal), 220, 48));
      })
      .catch(() => sparkline.setAttribute("d", ""));
  }
}

function refreshHistoryList() {
  historyList.innerHTML = "";
  for (const entry of history.list()) {
    const li = document.createElement("li");
    li.textContent = `${entry.entryId} · ${entry.fields.editing_prompt} · ${entry.state}`;
    li.className = entry === history.active() ? "active" : "";
    li.onclick = () => {
      history.select(entry.entryId);
      refreshHistoryList();
      renderEntry(history.active());
    };
    historyList.appendChild(li);
  }
}

submitBtn.addEventListener("click", async () => {
  if (!imageBlob || !box) {
    hint.textContent = "load an image and draw a target box first";
    return;
  }
  const fields: EditRequestFields = {
    inversion_prompt: invPrompt.value,
    editing_prompt: editPrompt.value,
    object_word: objectWord.value,
    bbox: [box.x0, box.y0, box.x1, box.y1],
  };
  banner.textContent = "";
  banner.className = "banner";
  try {
    const { id } = await submitJob(client, imageBlob, fields);
    const entry = history.add(id, fields, box, URL.createObjectURL(imageBlob));
    refreshHistoryList();
    renderEntry(entry);
    const job = await pollJob(client, id, {
      onUpdate: (j) => {
        history.updateByJob(id, { state: j.state, errorText: j.error, artifacts: j.artifacts });
        if (history.active()?.jobId === id) renderEntry(history.active());
        refreshHistoryList();
      },
      onNetworkError: (err, attempt) => {
        banner.textContent = `connection lost (retry ${attempt}): ${err.message}`;
        banner.className = "banner warning";
      },
    });
    history.updateByJob(id, { state: job.state, errorText: job.error, artifacts: job.artifacts });
    if (history.active()?.jobId === id) renderEntry(history.active());
    refreshHistoryList();
  } catch (err) {
    if (err instanceof ValidationError) {
      hint.textContent = `${err.field}: ${err.message}`;
    } else {
      banner.textContent = (err as Error).message;
      banner.className = "banner error";
    }
  }
});

overlaySelect.addEventListener("change", () => renderEntry(history.active()));
overlayOpacity.addEventListener("input", () => {
  overlayImg.style.opacity = overlayOpacity.value;
});

setStatus(useMock ? "mock service mode" : "ready");
