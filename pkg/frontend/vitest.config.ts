import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the end-to-end test trains two tiny models through the real server
    testTimeout: 30_000,
    hookTimeout: 120_000,
  },
});
