import type { FetchLike } from "./api.js";
import type { JobState, JobStateResponse } from "./types.js";

export interface MockJobScript {
  /** states returned by successive GET /jobs/{id} calls; last one repeats */
  states: JobState[];
  error?: string;
  artifacts?: string[];
  /** reject this submission with a 400 on the named field */
  rejectField?: string;
  rejectMessage?: string;
}

export interface MockServiceOptions {
  script?: MockJobScript;
  lossLog?: string;
  /** indices (1-based GET counts) that fail with a network error */
  networkFailuresAt?: number[];
}

const DEFAULT_LOSS_LOG = [
  "iteration,l_in,l_out,l_oii,l_sai,l_bg,l_total,alpha_i",
  "0,0.7,0.28,0.98,0.05,0,0.5025,150",
  "1,0.5,0.25,0.75,0.09,0.08,0.4175,135",
  "2,0.3,0.2,0.5,0.08,0.07,0.2875,120",
].join("\n");

const PNG_STUB = new Uint8Array([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

/**
 * A fetch-compatible stand-in for the edit service, good enough to drive the
 * whole submit/poll/render loop in tests and in the demo page (?mock=1).
 */
export function createMockFetch(options: MockServiceOptions = {}): FetchLike {
  const script = options.script ?? { states: ["queued", "running", "done"] };
  const artifacts = script.artifacts ?? [
    "input.png", "edited.png", "heatmap.png", "loss_log.csv", "config.json", "result.json",
    "masks/target.png", "masks/source.png", "masks/edge.png", "masks/background.png",
  ];
  let jobCounter = 0;
  const polls = new Map<string, number>();

  return async (url: string, init?: RequestInit): Promise<Response> => {
    const method = init?.method ?? "GET";
    const path = url.replace(/^https?:\/\/[^/]+/, "");

    if (method === "POST" && path === "/jobs") {
      const form = init?.body as FormData;
      const raw = form.get("request");
      if (typeof raw !== "string") {
        return jsonResponse({ detail: { field: "request", message: "missing request part" } }, 400);
      }
      const fields = JSON.parse(raw);
      if (script.rejectField) {
        return jsonResponse(
          { detail: { field: script.rejectField, message: script.rejectMessage ?? "invalid" } },
          400,
        );
      }
      if (!fields.object_word || !String(fields.inversion_prompt ?? "")
          .toLowerCase().split(/\s+/).includes(String(fields.object_word).toLowerCase())) {
        return jsonResponse(
          { detail: { field: "object_word", message: "object word must occur in the inversion prompt" } },
          400,
        );
      }
      const id = `mock-${++jobCounter}`;
      polls.set(id, 0);
      return jsonResponse({ id, state: "queued" }, 202);
    }

    const artifactMatch = path.match(/^\/jobs\/([^/]+)\/artifacts\/(.+)$/);
    if (method === "GET" && artifactMatch) {
      const [, id, name] = artifactMatch;
      if (!polls.has(id)) return jsonResponse({ detail: "unknown job" }, 404);
      const count = polls.get(id)!;
      const state = script.states[Math.min(count, script.states.length - 1)];
      if (state === "queued" || state === "running") {
        return jsonResponse({ detail: `job is ${state}` }, 409);
      }
      if (!artifacts.includes(name)) return jsonResponse({ detail: "unknown artifact" }, 404);
      if (name.endsWith(".csv")) {
        return new Response(options.lossLog ?? DEFAULT_LOSS_LOG, {
          status: 200, headers: { "content-type": "text/csv" },
        });
      }
      if (name.endsWith(".json")) return jsonResponse({ mock: true, job: id });
      return new Response(PNG_STUB, { status: 200, headers: { "content-type": "image/png" } });
    }

    const jobMatch = path.match(/^\/jobs\/([^/]+)$/);
    if (method === "GET" && jobMatch) {
      const id = jobMatch[1];
      if (!polls.has(id)) return jsonResponse({ detail: "unknown job" }, 404);
      const count = polls.get(id)! + 1;
      polls.set(id, count);
      if (options.networkFailuresAt?.includes(count)) {
        throw new TypeError("NetworkError: connection refused (mock)");
      }
      const state = script.states[Math.min(count - 1, script.states.length - 1)];
      const body: JobStateResponse = {
        id,
        state,
        created_at: 0,
        finished_at: state === "done" || state === "failed" ? 1 : null,
        error: state === "failed" ? script.error ?? "mock failure" : null,
        artifacts: state === "done" ? artifacts : [],
        request: {},
      };
      return jsonResponse(body);
    }

    if (method === "GET" && path === "/presets") {
      return jsonResponse({
        backbone: { kind: "toy", num_steps: 50, guidance_scale: 7.5 },
        objective: { iterations: 50, alpha0: 150, update_step_index: 35 },
        edit: { S: 7, layer_set: "decoder" },
        regions: { threshold: 0.3, dilate_kernel: 3 },
      });
    }
    if (method === "GET" && path === "/healthz") return jsonResponse({ status: "ok" });
    return jsonResponse({ detail: "not found" }, 404);
  };
}
